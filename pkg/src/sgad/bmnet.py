"""Binary mask network: stem output -> one keep/drop bit per block per sample."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NoiseSchedule


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        # ties at exactly 0.5 keep the block
        return (x >= 0.5).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return grad


def binarize(x):
    """Round to {0, 1} at 0.5 (ties -> 1); the backward pass is the identity."""
    return _RoundSTE.apply(x)


class BMNet(nn.Module):
    """avg-pool to a small grid -> 3x3/2 conv -> BN -> ReLU -> GAP -> FC to L logits.

    The pooling keeps the conv cost near 0.03% of a depth-32 backbone at 32x32.
    """

    def __init__(self, in_channels, num_blocks, channels=8, grid=8):
        super().__init__()
        self.grid = grid
        self.conv = nn.Conv2d(in_channels, channels, 3, stride=2, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.fc = nn.Linear(channels, num_blocks)

    def pooled_size(self, size: int) -> int:
        return min(self.grid, size)

    def forward(self, z1):
        g = self.pooled_size(z1.shape[-1])
        h = F.adaptive_avg_pool2d(z1, g) if g != z1.shape[-1] else z1
        h = F.relu(self.bn(self.conv(h)))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(h, 1), 1))


@dataclass
class MaskBatch:
    bits: torch.Tensor           # N x L in {0, 1}, forced positions already set
    pre_sigmoid: torch.Tensor    # BMNet logits before noise
    sigmoid_out: torch.Tensor    # sigmoid(logits + noise)
    noise: torch.Tensor

    @property
    def keep_ratio(self) -> torch.Tensor:
        """Per-block fraction of samples that execute the block (rats_b)."""
        return self.bits.detach().float().mean(0)

    def saturation(self, lo=0.05, hi=0.95) -> float:
        """Fraction of sigmoid outputs that are not yet saturated near 0 or 1."""
        s = self.sigmoid_out.detach()
        return float(((s >= lo) & (s <= hi)).float().mean())


def compute_mask_logits(z1, bmnet: BMNet):
    return bmnet(z1)


def sample_noise(schedule: NoiseSchedule, epoch, shape, generator=None, train=True,
                 dtype=torch.float32):
    if not train:
        return torch.zeros(shape, dtype=dtype)
    std = schedule.sigma(epoch)
    if std == 0.0:
        return torch.zeros(shape, dtype=dtype)
    return torch.randn(shape, generator=generator, dtype=dtype) * std


def force_bits(bits, forced):
    if not forced:
        return bits
    sel = torch.zeros(bits.shape[1], dtype=torch.bool)
    sel[list(forced)] = True
    return bits.masked_fill(sel, 1.0)


def mask_batch(z1, bmnet: BMNet, forced, epoch=0.0, train=False,
               schedule: NoiseSchedule | None = None, generator=None) -> MaskBatch:
    """logits -> +noise (train only) -> sigmoid -> round with STE -> force bits."""
    logits = bmnet(z1)
    noise = sample_noise(schedule or NoiseSchedule(), epoch, logits.shape, generator,
                         train=train, dtype=logits.dtype)
    s = torch.sigmoid(logits + noise)
    bits = force_bits(binarize(s), forced)
    return MaskBatch(bits=bits, pre_sigmoid=logits, sigmoid_out=s, noise=noise)
