"""The three-term training objective."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import DomainError, NumericError


def classification_loss(logits, labels):
    """Mean cross-entropy over the batch."""
    m = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= m):
        raise DomainError(f"labels must lie in [0, {m})")
    return F.cross_entropy(logits, labels)


def measured_drop_ratio(bits):
    """Per-sample fraction of the L blocks that are skipped (forced blocks included)."""
    return 1.0 - bits.mean(1)


def drop_ratio_regularizer(rat_s, mask):
    """Mean absolute gap between expected and measured per-sample drop ratios.

    ``mask`` is a MaskBatch or the N x L bit tensor. Gradients reach the bits
    (and, through the STE, the BMNet) but never ``rat_s`` when it is detached.
    """
    bits = getattr(mask, "bits", mask)
    return (rat_s - measured_drop_ratio(bits)).abs().mean()


def _finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return math.isfinite(x)


def total_loss(r_prime, r_m, r_g, cfg: LossConfig = LossConfig()):
    """Weighted sum; zero-weighted terms are left out of the graph entirely."""
    for name, term in (("R'", r_prime), ("R^m", r_m), ("R^g", r_g)):
        if not _finite(term):
            raise NumericError(f"non-finite loss term {name}: {float(torch.as_tensor(term).detach())}")
    total = 0.0
    for w, term in ((cfg.alpha, r_prime), (cfg.alpha_m, r_m), (cfg.alpha_g, r_g)):
        if w != 0.0:
            total = total + w * term
    return total
