"""The assembled network: backbone + BMNet, plus the SGNet while training."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Backbone
from .bmnet import BMNet, MaskBatch, mask_batch
from .config import NetworkConfig, NoiseSchedule
from .sgnet import SGNet


@dataclass
class TrainOutput:
    logits: torch.Tensor
    bits: torch.Tensor
    mask: MaskBatch | None
    sg_logits: torch.Tensor | None


class SGADModel(nn.Module):
    def __init__(self, cfg: NetworkConfig, with_sgnet=True):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.bmnet = BMNet(cfg.widths[0], self.backbone.num_blocks, cfg.bmnet_channels, cfg.bmnet_grid)
        self.sgnet = SGNet(cfg.in_channels, cfg.num_classes, cfg.sgnet_widths) if with_sgnet else None

    @classmethod
    def build(cls, cfg: NetworkConfig, with_sgnet=True, seed=None) -> "SGADModel":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed if seed is None else seed)
            model = cls(cfg, with_sgnet)
            model.backbone.reset_parameters()
        return model

    @property
    def num_blocks(self) -> int:
        return self.backbone.num_blocks

    @property
    def forced(self) -> tuple[int, ...]:
        return self.backbone.forced

    def ones_mask(self, n):
        return torch.ones(n, self.num_blocks)

    def masks(self, z1, epoch=0.0, train=False, schedule: NoiseSchedule | None = None,
              generator=None) -> MaskBatch:
        return mask_batch(z1, self.bmnet, self.forced, epoch, train, schedule, generator)

    def forward_train(self, x, epoch=0.0, schedule=None, generator=None, mask_override=None,
                      need_sgnet=True) -> TrainOutput:
        """Dense training forward. ``mask_override`` freezes the bits (no BMNet gradient)."""
        bb = self.backbone
        z1 = bb.stem(x)
        mask = None
        if mask_override is not None:
            bits = mask_override.to(z1.dtype)
            bb.check_mask(bits, x.shape[0], check_forced=False)
        elif self.cfg.adaptive:
            mask = self.masks(z1, epoch, True, schedule, generator)
            bits = mask.bits
        else:
            bits = None
        z = bb.run_blocks(z1, bits)
        logits = bb.head(z)
        if bits is None:
            bits = self.ones_mask(x.shape[0])
        sg = self.sgnet(x) if (need_sgnet and self.sgnet is not None) else None
        return TrainOutput(logits, bits, mask, sg)

    @torch.no_grad()
    def infer(self, x):
        """Eval-mode prediction path: noise off, SGNet unused, dropped blocks not computed.

        Returns (logits, bits).
        """
        bb = self.backbone
        z1 = bb.stem(x)
        if self.cfg.adaptive:
            bits = self.masks(z1).bits
        else:
            bits = self.ones_mask(x.shape[0])
        z = bb.run_blocks(z1, bits, sparse=True)
        return bb.head(z), bits

    def parameter_groups(self) -> dict[str, nn.Module]:
        """Named modules that are serialized as one tensor file each."""
        bb = self.backbone
        groups = {"stem": bb.stem}
        for blk in bb.blocks:
            groups[f"block_{blk.cfg.origin:03d}"] = blk
        groups["head"] = bb.fc
        groups["bmnet"] = self.bmnet
        if self.sgnet is not None:
            groups["sgnet"] = self.sgnet
        return groups

    def block_parameters(self, i):
        return list(self.backbone.blocks[i].parameters())


@torch.no_grad()
def run_inference(model: SGADModel, images, batch_size=500):
    """Eval-mode logits and bits over a dataset, in fixed batch order."""
    was_training = model.training
    model.eval()
    logits, bits = [], []
    for s in range(0, images.shape[0], batch_size):
        lg, b = model.infer(images[s:s + batch_size])
        logits.append(lg)
        bits.append(b)
    model.train(was_training)
    if not logits:
        return torch.zeros(0, model.cfg.num_classes), torch.zeros(0, model.num_blocks)
    return torch.cat(logits), torch.cat(bits)
