"""Soft guideline network and the variance -> expected drop ratio mapping.

The guideline is only used while training; nothing here runs at inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import MappingConfig
from .errors import DomainError


class SGNet(nn.Module):
    """Four conv-bn-relu layers (stride 1, 2, 1, 2), global pooling, linear head."""

    def __init__(self, in_channels, num_classes, widths=(16, 16, 32, 32)):
        super().__init__()
        layers = []
        c = in_channels
        for w, s in zip(widths, (1, 2, 1, 2)):
            layers += [nn.Conv2d(c, w, 3, stride=s, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU()]
            c = w
        self.features = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.fc = nn.Linear(c, num_classes)

    def forward(self, x):
        return self.fc(self.features(x))


@dataclass
class GuidelineBatch:
    softmax_probs: torch.Tensor
    variance: torch.Tensor
    expected_drop: torch.Tensor


def sgnet_forward(x, sgnet: SGNet):
    return torch.softmax(sgnet(x), dim=1)


def soft_target_variance(probs):
    """Per-row variance of the softmax vector around the uniform value 1/M."""
    m = probs.shape[-1]
    return ((probs - 1.0 / m) ** 2).mean(-1)


def variance_from_logits(logits):
    """Same quantity written in terms of the pre-softmax scores.

    ``sum_i exp(2 s_i) / (M (sum_j exp(s_j))^2) - 1/M^2``, evaluated after
    shifting the scores by their row maximum.
    """
    m = logits.shape[-1]
    if isinstance(logits, torch.Tensor):
        e = torch.exp(logits - logits.max(-1, keepdim=True).values)
    else:
        logits = np.asarray(logits, dtype=np.float64)
        e = np.exp(logits - logits.max(-1, keepdims=True))
    return (e ** 2).sum(-1) / (m * e.sum(-1) ** 2) - 1.0 / m ** 2


def map_variance_to_drop_ratio(var, cfg: MappingConfig):
    """``1 - L**(1 - scale*var) / L``; larger variance (easier sample) -> larger drop ratio."""
    upper = 1.0 / cfg.num_classes
    if isinstance(var, torch.Tensor):
        bad = bool(((var < 0) | (var > upper * (1 + 1e-9))).any()) if var.numel() else False
        L = torch.tensor(float(cfg.num_blocks), dtype=var.dtype)
        pow_ = torch.pow
    else:
        var = np.asarray(var, dtype=np.float64)
        bad = bool(np.any((var < 0) | (var > upper * (1 + 1e-9))))
        L = float(cfg.num_blocks)
        pow_ = np.power
    if bad:
        raise DomainError(f"variance must lie in [0, 1/M] = [0, {upper}]")
    return 1.0 - pow_(L, 1.0 - cfg.scale * var) / L


def guideline(x, sgnet: SGNet, cfg: MappingConfig) -> tuple[torch.Tensor, GuidelineBatch]:
    """Returns SGNet logits (trainable) and the detached guideline targets."""
    logits = sgnet(x)
    probs = torch.softmax(logits, dim=1)
    var = soft_target_variance(probs.detach())
    return logits, GuidelineBatch(probs, var, map_variance_to_drop_ratio(var, cfg))


def half_drop_preimages(cfg: MappingConfig) -> tuple[float, float]:
    """Widths of the variance intervals mapped to [0, s_max/2] and [s_max/2, s_max].

    Only meaningful in consistent mode, where the mapping reaches s_max at 1/M.
    """
    L, scale = cfg.num_blocks, cfg.scale
    # 1 - L**(-scale v) = s_max/2  ->  v = -ln(1 - s_max/2) / (scale ln L)
    v_half = -math.log(1 - cfg.s_max / 2) / (scale * math.log(L))
    return v_half, 1.0 / cfg.num_classes - v_half
