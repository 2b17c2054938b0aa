"""End-to-end training loop, metrics stream, and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .analysis import FlopsReport, flops_report
from .config import ExperimentConfig, TrainConfig
from .data import Dataset
from .errors import NumericError
from .loss import classification_loss, drop_ratio_regularizer, total_loss
from .model import SGADModel, run_inference
from .sgnet import map_variance_to_drop_ratio, soft_target_variance

log = logging.getLogger(__name__)


def lr_schedule(epoch, cfg: TrainConfig) -> float:
    passed = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.base_lr * cfg.decay_factor ** passed


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class GradientLog:
    """Running mean of per-block mean-absolute gradients."""

    def __init__(self, num_blocks):
        self.total = np.zeros(num_blocks, dtype=np.float64)
        self.count = 0

    def add(self, per_block):
        self.total += np.asarray(per_block, dtype=np.float64)
        self.count += 1

    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.total)
        return self.total / self.count

    def state_dict(self):
        return {"total": [float(v) for v in self.total], "count": self.count}

    def load_state_dict(self, d):
        self.total = np.asarray(d["total"], dtype=np.float64)
        self.count = int(d["count"])


def block_grad_l1(model: SGADModel) -> list[float]:
    """Mean |grad| over each block's parameters (L1 norm / parameter count)."""
    out = []
    for blk in model.backbone.blocks:
        l1, n = 0.0, 0
        for p in blk.parameters():
            n += p.numel()
            if p.grad is not None:
                l1 += float(p.grad.detach().abs().sum(dtype=torch.float64))
        out.append(l1 / n)
    return out


def log_gradient_magnitudes(state: "TrainState") -> np.ndarray:
    return state.grad_log.mean()


def make_optimizer(model: SGADModel, cfg: TrainConfig):
    return torch.optim.SGD(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


@dataclass
class TrainState:
    model: SGADModel
    optimizer: torch.optim.Optimizer
    config: ExperimentConfig
    epoch: int = 0
    step: int = 0
    grad_log: GradientLog = None

    def __post_init__(self):
        if self.grad_log is None:
            self.grad_log = GradientLog(self.model.num_blocks)

    @classmethod
    def fresh(cls, cfg: ExperimentConfig, model: SGADModel | None = None) -> "TrainState":
        model = model or SGADModel.build(cfg.network)
        return cls(model, make_optimizer(model, cfg.train), cfg)


def augment_batch(x, rng: np.random.Generator, pad=None):
    """Random crop after zero padding plus horizontal flip.

    ``pad`` defaults to 1/8 of the image side (4 pixels at 32x32).
    """
    if pad is None:
        pad = max(1, x.shape[-1] // 8)
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


def train_step(state: TrainState, x, y, batch_index=0, mask_override=None) -> dict:
    """One SGD update of all parameters against the weighted three-term loss."""
    cfg = state.config
    model, opt = state.model, state.optimizer
    lcfg = cfg.loss
    model.train()
    lr = lr_schedule(state.epoch, cfg.train)
    for g in opt.param_groups:
        g["lr"] = lr

    adaptive = model.cfg.adaptive
    use_sg = adaptive and model.sgnet is not None and (lcfg.alpha_g > 0 or lcfg.alpha_m > 0)
    gen = torch.Generator().manual_seed(derive_seed(cfg.train.seed, state.step, 1))
    out = model.forward_train(x, state.epoch, cfg.noise, gen, mask_override, need_sgnet=use_sg)

    r_prime = classification_loss(out.logits, y)
    zero = torch.zeros((), dtype=r_prime.dtype)
    r_g, r_m = zero, zero
    if out.sg_logits is not None:
        r_g = classification_loss(out.sg_logits, y)
        probs = torch.softmax(out.sg_logits.detach(), dim=1)
        rat_s = map_variance_to_drop_ratio(soft_target_variance(probs), cfg.mapping)
        r_m = drop_ratio_regularizer(rat_s, out.bits)
    try:
        loss = total_loss(r_prime, r_m, r_g, lcfg)
    except NumericError as e:
        keep = out.bits.detach().float().mean(0).tolist()
        raise NumericError(f"{e} at epoch {state.epoch} batch {batch_index} (step {state.step}); "
                           f"per-block keep ratio {keep}") from None

    opt.zero_grad(set_to_none=True)
    if isinstance(loss, torch.Tensor) and loss.requires_grad:
        loss.backward()
    record = {
        "kind": "step",
        "epoch": state.epoch,
        "step": state.step,
        "lr": lr,
        "losses": {"R_prime": float(r_prime.detach()), "R_m": float(r_m.detach()), "R_g": float(r_g.detach()),
                   "total": float(loss.detach() if isinstance(loss, torch.Tensor) else loss)},
        "rats_b": [float(v) for v in out.bits.detach().float().mean(0)],
    }
    if state.epoch >= cfg.train.grad_log_start:
        g = block_grad_l1(model)
        state.grad_log.add(g)
        record["grad_l1"] = g
    opt.step()
    state.step += 1
    return record


@dataclass
class EvalResult:
    accuracy: float
    executed_blocks: np.ndarray
    predictions: np.ndarray
    bits: np.ndarray
    flops: FlopsReport
    logits: torch.Tensor = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_executed_blocks": float(self.executed_blocks.mean()) if len(self.executed_blocks) else 0.0,
            "flops": self.flops.to_dict(),
        }


def evaluate(model: SGADModel, dataset: Dataset, include_bmnet=True, batch_size=500) -> EvalResult:
    """Eval-mode accuracy, per-sample executed block counts and FLOPs; SGNet is not run."""
    logits, bits = run_inference(model, dataset.images, batch_size)
    pred = logits.argmax(1)
    acc = float((pred == dataset.labels).float().mean()) if len(dataset) else 0.0
    b = bits.numpy()
    keep = (b > 0).mean(0) if len(b) else np.ones(model.num_blocks)
    return EvalResult(
        accuracy=acc,
        executed_blocks=(b > 0).sum(1),
        predictions=pred.numpy(),
        bits=b,
        flops=flops_report(model.cfg, keep, include_bmnet),
        logits=logits,
    )


@torch.no_grad()
def sgnet_outputs(model: SGADModel, images, batch_size=500):
    """Eval-mode SGNet softmax rows and their variance."""
    was = model.training
    model.eval()
    probs = torch.cat([torch.softmax(model.sgnet(images[s:s + batch_size]), 1)
                       for s in range(0, images.shape[0], batch_size)])
    model.train(was)
    return probs, soft_target_variance(probs)


class MetricsWriter:
    """Line-delimited JSON; key order and float formatting are deterministic."""

    def __init__(self, path, append=False):
        self.path = path
        self.fh = open(path, "a" if append else "w")

    def write(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def header_record(cfg: ExperimentConfig) -> dict:
    return {"kind": "header", "version": __version__, "config": cfg.to_dict()}


def epoch_order(seed, epoch, n) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def train_epoch(state: TrainState, train: Dataset, writer: MetricsWriter | None = None) -> list[dict]:
    tcfg = state.config.train
    order = torch.from_numpy(epoch_order(tcfg.seed, state.epoch, len(train)))
    records = []
    for bi, s in enumerate(range(0, len(train), tcfg.batch_size)):
        idx = order[s:s + tcfg.batch_size]
        x, y = train.images[idx], train.labels[idx]
        if tcfg.augment:
            x = augment_batch(x, np.random.default_rng([tcfg.seed, state.step, 11]))
        rec = train_step(state, x, y, bi)
        if writer:
            writer.write(rec)
        records.append(rec)
    return records


def epoch_record(state: TrainState, records, test: Dataset | None, include_bmnet=True) -> dict:
    model = state.model
    rec = {
        "kind": "epoch",
        "epoch": state.epoch,
        "lr": lr_schedule(state.epoch, state.config.train),
        "train_losses": {k: float(np.mean([r["losses"][k] for r in records])) for k in records[0]["losses"]},
    }
    if state.epoch >= state.config.train.grad_log_start:
        rec["grad_l1_mean"] = [float(v) for v in state.grad_log.mean()]
    if test is not None and len(test):
        ev = evaluate(model, test, include_bmnet, state.config.train.eval_batch_size)
        rec.update(accuracy=ev.accuracy, n_flops=ev.flops.n_flops,
                   mean_executed_blocks=float(ev.executed_blocks.mean()),
                   rats_b=ev.flops.per_block_keep_ratio)
        if model.sgnet is not None and model.cfg.adaptive:
            probs, _ = sgnet_outputs(model, test.images, state.config.train.eval_batch_size)
            rec["sgnet_accuracy"] = float((probs.argmax(1) == test.labels).float().mean())
    return rec


def fit(state: TrainState, train: Dataset, test: Dataset | None = None, writer: MetricsWriter | None = None,
        on_epoch_end=None, include_bmnet=True, until_epoch=None) -> TrainState:
    """Train from ``state.epoch`` to ``cfg.train.epochs`` (or ``until_epoch``)."""
    end = state.config.train.epochs if until_epoch is None else until_epoch
    while state.epoch < end:
        records = train_epoch(state, train, writer)
        rec = epoch_record(state, records, test, include_bmnet)
        log.info("epoch %d: %s", state.epoch,
                 {k: rec[k] for k in ("accuracy", "n_flops", "sgnet_accuracy") if k in rec})
        if writer:
            writer.write(rec)
        state.epoch += 1
        if on_epoch_end:
            on_epoch_end(state, rec)
    return state
