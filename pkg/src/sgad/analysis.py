"""MAC accounting, keep ratios, dead-block pruning and inference export.

FLOPs are counted as multiply-accumulates of conv and fully-connected layers
only; normalization, pooling and elementwise ops are free.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import BlockConfig, NetworkConfig
from .errors import DomainError, PruneError
from .model import SGADModel, run_inference


def conv_out_size(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def count_conv_macs(in_c, out_c, kernel, out_h, out_w) -> int:
    return out_h * out_w * out_c * in_c * kernel * kernel


def count_fc_macs(in_dim, out_dim) -> int:
    return in_dim * out_dim


def count_block_macs(block: BlockConfig, spatial_dims) -> int:
    """Two k x k convs plus the 1x1 projection of shape-changing blocks."""
    h, w = spatial_dims
    k, s = block.conv_kernel, block.spatial_stride
    oh, ow = conv_out_size(h, k, s), conv_out_size(w, k, s)
    macs = count_conv_macs(block.in_channels, block.out_channels, k, oh, ow)
    macs += count_conv_macs(block.out_channels, block.out_channels, k, oh, ow)
    if block.changes_shape:
        macs += count_conv_macs(block.in_channels, block.out_channels, 1,
                                conv_out_size(h, 1, s), conv_out_size(w, 1, s))
    return macs


def _block_table(cfg: NetworkConfig, blocks):
    size = cfg.image_size
    table = []
    for b in blocks:
        table.append(count_block_macs(b, (size, size)))
        size = conv_out_size(size, b.conv_kernel, b.spatial_stride)
    return table


def stem_macs(cfg: NetworkConfig) -> int:
    s = cfg.image_size
    return count_conv_macs(cfg.in_channels, cfg.widths[0], cfg.conv_kernel, s, s)


def head_macs(cfg: NetworkConfig) -> int:
    return count_fc_macs(cfg.widths[-1], cfg.num_classes)


def bmnet_macs(cfg: NetworkConfig) -> int:
    g = min(cfg.bmnet_grid, cfg.image_size)
    o = conv_out_size(g, 3, 2)
    return (count_conv_macs(cfg.widths[0], cfg.bmnet_channels, 3, o, o)
            + count_fc_macs(cfg.bmnet_channels, cfg.num_blocks))


def block_macs_table(cfg: NetworkConfig) -> list[int]:
    """MACs of each surviving block, in current (post-pruning) order."""
    return _block_table(cfg, cfg.blocks())


def baseline_macs(cfg: NetworkConfig) -> int:
    """The unmasked, unpruned backbone without BMNet."""
    return stem_macs(cfg) + sum(_block_table(cfg, cfg.all_blocks())) + head_macs(cfg)


def count_parameters(module) -> int:
    return sum(p.numel() for p in module.parameters())


def batch_keep_ratio(bits, i=None):
    """Fraction of samples whose bit is 1 at block ``i`` (all blocks if None)."""
    b = bits.detach().cpu().numpy() if isinstance(bits, torch.Tensor) else np.asarray(bits)
    if b.ndim != 2 or b.shape[0] == 0:
        raise DomainError("keep ratio needs at least one sample")
    ratios = (b > 0).mean(axis=0)
    return ratios if i is None else float(ratios[i])


def normalized_flops(per_block_macs, keep_ratios, static_macs, bmnet, baseline,
                     include_bmnet=True) -> float:
    used = static_macs + float(np.dot(np.asarray(keep_ratios, dtype=np.float64),
                                      np.asarray(per_block_macs, dtype=np.float64)))
    if include_bmnet:
        used += bmnet
    return used / baseline


@dataclass
class FlopsReport:
    per_block_macs: list[int]
    block_origins: list[int]
    static_macs: int
    bmnet_macs: int
    baseline_macs: int
    per_block_keep_ratio: list[float]
    n_flops: float
    include_bmnet: bool = True
    dead_blocks: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def flops_report(cfg: NetworkConfig, keep_ratios=None, include_bmnet=True) -> FlopsReport:
    table = block_macs_table(cfg)
    keep = np.ones(len(table)) if keep_ratios is None else np.asarray(keep_ratios, dtype=np.float64)
    static = stem_macs(cfg) + head_macs(cfg)
    bm = bmnet_macs(cfg) if cfg.adaptive else 0
    base = baseline_macs(cfg)
    nf = normalized_flops(table, keep, static, bm, base, include_bmnet)
    dead = [int(i) for i in np.flatnonzero(keep == 0.0)]
    return FlopsReport(
        per_block_macs=table,
        block_origins=[b.origin for b in cfg.blocks()],
        static_macs=static,
        bmnet_macs=bm,
        baseline_macs=base,
        per_block_keep_ratio=[float(k) for k in keep],
        n_flops=nf,
        include_bmnet=include_bmnet,
        dead_blocks=dead,
    )


def detect_dead_blocks(model: SGADModel, images, batch_size=500) -> list[int]:
    """Blocks that no sample of ``images`` executes in eval mode."""
    _, bits = run_inference(model, images, batch_size)
    if bits.shape[0] == 0:
        raise DomainError("dead-block detection needs at least one sample")
    counts = (bits > 0).sum(0)
    return [int(i) for i in torch.nonzero(counts == 0).flatten()]


def _copy_module(dst, src):
    dst.load_state_dict(src.state_dict())


def prune_dead_blocks(model: SGADModel, dead, images, batch_size=500) -> SGADModel:
    """Remove blocks that are dropped by every sample of the reference set.

    Returns a new model whose logits and (re-indexed) masks match the original
    exactly on ``images``. Raises PruneError naming a sample that executes a
    block listed in ``dead``.
    """
    dead = sorted(set(int(i) for i in dead))
    ref_logits, ref_bits = run_inference(model, images, batch_size)
    for i in dead:
        if not 0 <= i < model.num_blocks:
            raise DomainError(f"block index {i} out of range")
        live = torch.nonzero(ref_bits[:, i] > 0).flatten()
        if live.numel():
            raise PruneError(i, int(live[0]))
    if not dead:
        return model

    cfg = model.cfg
    origins = [b.cfg.origin for b in model.backbone.blocks]
    pruned_cfg = dataclasses.replace(
        cfg, pruned_blocks=tuple(sorted(cfg.pruned_blocks + tuple(origins[i] for i in dead))))
    pruned = SGADModel(pruned_cfg, with_sgnet=model.sgnet is not None)

    src_bb, dst_bb = model.backbone, pruned.backbone
    _copy_module(dst_bb.stem, src_bb.stem)
    _copy_module(dst_bb.fc, src_bb.fc)
    keep_idx = [i for i in range(model.num_blocks) if i not in dead]
    for j, i in enumerate(keep_idx):
        _copy_module(dst_bb.blocks[j], src_bb.blocks[i])
    _copy_module(pruned.bmnet.conv, model.bmnet.conv)
    _copy_module(pruned.bmnet.bn, model.bmnet.bn)
    with torch.no_grad():
        pruned.bmnet.fc.weight.copy_(model.bmnet.fc.weight[keep_idx])
        pruned.bmnet.fc.bias.copy_(model.bmnet.fc.bias[keep_idx])
    if model.sgnet is not None:
        _copy_module(pruned.sgnet, model.sgnet)
    pruned.train(model.training)

    logits, bits = run_inference(pruned, images, batch_size)
    if not (torch.equal(logits, ref_logits) and torch.equal(bits, ref_bits[:, keep_idx])):
        raise RuntimeError("pruned model diverged from the original on the reference set")
    return pruned


def export_inference_model(model: SGADModel) -> SGADModel:
    """Copy of the backbone and BMNet with the SGNet removed."""
    out = SGADModel(model.cfg, with_sgnet=False)
    _copy_module(out.backbone, model.backbone)
    _copy_module(out.bmnet, model.bmnet)
    out.eval()
    return out


def saturation_fraction(model: SGADModel, images, batch_size=500, lo=0.05, hi=0.95) -> float:
    """Fraction of eval-mode sigmoid outputs inside [lo, hi], i.e. not saturated."""
    was = model.training
    model.eval()
    total, inside = 0, 0
    with torch.no_grad():
        for s in range(0, images.shape[0], batch_size):
            z1 = model.backbone.stem(images[s:s + batch_size])
            sig = model.masks(z1).sigmoid_out
            inside += int(((sig >= lo) & (sig <= hi)).sum())
            total += sig.numel()
    model.train(was)
    return inside / max(total, 1)
