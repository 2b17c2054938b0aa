"""CIFAR-style residual backbone whose blocks can be bypassed per sample.

A block computes ``z + m * f(z)`` where ``f`` is conv-bn-relu-conv-bn and ``m``
is the sample's mask bit. Blocks that change channel count or stride carry a
1x1 projection on the skip path and are always executed.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BlockConfig, NetworkConfig
from .errors import ConfigError, StructuralError

INIT_SCHEME = ("backbone conv: kaiming_normal(fan_out, relu); other conv and fc: kaiming_uniform(a=sqrt(5)); "
               "bn: gamma=1, beta=0; seeded by network.init_seed")


def conv(in_c, out_c, kernel, stride=1):
    return nn.Conv2d(in_c, out_c, kernel, stride=stride, padding=kernel // 2, bias=False)


@dataclass
class BackboneOutput:
    logits: torch.Tensor
    features: torch.Tensor


class ResidualBlock(nn.Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.conv_kernel
        self.conv1 = conv(cfg.in_channels, cfg.out_channels, k, cfg.spatial_stride)
        self.bn1 = nn.BatchNorm2d(cfg.out_channels)
        self.conv2 = conv(cfg.out_channels, cfg.out_channels, k)
        self.bn2 = nn.BatchNorm2d(cfg.out_channels)
        self.proj = None
        if cfg.changes_shape:
            self.proj = nn.Sequential(
                conv(cfg.in_channels, cfg.out_channels, 1, cfg.spatial_stride),
                nn.BatchNorm2d(cfg.out_channels),
            )

    @property
    def droppable(self) -> bool:
        return self.proj is None

    def residual(self, z):
        return self.bn2(self.conv2(F.relu(self.bn1(self.conv1(z)))))

    def forward(self, z, mask=None):
        """Dense masked forward; ``mask`` is a length-N float tensor or None (keep all).

        The mask is ignored for shape-changing blocks.
        """
        f = self.residual(z)
        if self.proj is not None:
            return self.proj(z) + f
        if mask is None:
            return z + f
        return z + mask.view(-1, 1, 1, 1).to(f.dtype) * f

    def forward_sparse(self, z, keep):
        """Evaluate ``f`` only on samples with ``keep`` set; others pass through untouched."""
        if self.proj is not None or bool(keep.all()):
            return self.forward(z)
        idx = keep.nonzero().squeeze(1)
        if idx.numel() == 0:
            return z
        out = z.clone()
        zk = z.index_select(0, idx)
        out[idx] = zk + self.residual(zk)
        return out


class Backbone(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.stem = nn.Sequential(
            conv(cfg.in_channels, w0, cfg.conv_kernel),
            nn.BatchNorm2d(w0),
            nn.ReLU(),
        )
        self.blocks = nn.ModuleList(ResidualBlock(b) for b in cfg.blocks())
        self.fc = nn.Linear(cfg.widths[-1], cfg.num_classes)
        self.forced = cfg.forced_blocks()

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                m.reset_parameters()

    def check_mask(self, bits, n, check_forced=True):
        if bits.dim() != 2 or bits.shape != (n, self.num_blocks):
            raise StructuralError(
                f"mask shape {tuple(bits.shape)} does not match (N={n}, L={self.num_blocks})")
        if check_forced and self.forced:
            if not bool((bits[:, list(self.forced)] == 1).all()):
                raise StructuralError(f"mask bits of forced blocks {self.forced} must be 1")

    def head(self, z):
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(z, 1), 1))

    def run_blocks(self, z, bits=None, sparse=False):
        for i, block in enumerate(self.blocks):
            if bits is None:
                z = block(z)
            elif sparse:
                z = block.forward_sparse(z, bits[:, i] > 0)
            else:
                z = block(z, bits[:, i])
        return z

    def forward(self, x, bits=None, sparse=False, check_forced=True) -> BackboneOutput:
        z1 = self.stem(x)
        if bits is not None:
            self.check_mask(bits, x.shape[0], check_forced)
        z = self.run_blocks(z1, bits, sparse)
        return BackboneOutput(self.head(z), z)


def build_backbone(config: NetworkConfig, seed: int | None = None) -> Backbone:
    if config.full_num_blocks < 2:
        raise ConfigError("the backbone needs at least 2 blocks")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.init_seed if seed is None else seed)
        net = Backbone(config)
        net.reset_parameters()
    return net


def masked_block_forward(z, mask_bit, block: ResidualBlock):
    """``z + mask_bit * f(z)`` for one block; ``mask_bit`` is a scalar or per-sample vector."""
    expected = block.cfg.in_channels
    if z.dim() != 4 or z.shape[1] != expected:
        raise StructuralError(f"block {block.cfg.index} expects {expected} channels, got {tuple(z.shape)}")
    m = torch.as_tensor(mask_bit, dtype=z.dtype)
    if m.dim() == 0:
        m = m.expand(z.shape[0])
    return block(z, m)


def forward_backbone(x, bits, backbone: Backbone, sparse=False, check_forced=True) -> BackboneOutput:
    return backbone(x, bits, sparse=sparse, check_forced=check_forced)
