"""Desk-scale behavioral experiment: unmasked baseline vs. several s_max values."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
from scipy import stats

from .analysis import detect_dead_blocks, saturation_fraction
from .config import DatasetSpec, ExperimentConfig, MappingConfig, NetworkConfig, NoiseSchedule, TrainConfig
from .data import load_dataset
from .trainer import MetricsWriter, TrainState, evaluate, fit, header_record, sgnet_outputs

log = logging.getLogger(__name__)


def desk_config(s_max=0.2, adaptive=True, epochs=40, seed=0, output_dir="runs/desk") -> ExperimentConfig:
    """Depth-26 member of the CIFAR ResNet family (12 blocks, 9 droppable) on 16x16 synthetic data."""
    net = NetworkConfig(widths=(16, 32, 64), blocks_per_stage=4, image_size=16, num_classes=10,
                        adaptive=adaptive, init_seed=seed)
    return ExperimentConfig(
        network=net,
        train=TrainConfig.scaled(epochs, batch_size=128, seed=seed, augment=True),
        mapping=MappingConfig(s_max=s_max),
        noise=NoiseSchedule(0.0, 3.0, max(1, round(epochs * 2 / 3))),
        data=DatasetSpec(source="synthetic", data_seed=seed, n_train=5000, n_test=1000, difficulty_mix=0.5),
        output_dir=output_dir,
    )


def run_one(cfg: ExperimentConfig, train=None, test=None, metrics_path=None) -> dict:
    if train is None:
        train, test = load_dataset(cfg.data, cfg.network)
    state = TrainState.fresh(cfg)
    writer = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(metrics_path)
        writer.write(header_record(cfg))
    try:
        fit(state, train, test, writer)
    finally:
        if writer:
            writer.close()
    model = state.model
    ev = evaluate(model, test)
    out = {
        "s_max": cfg.mapping.s_max if cfg.network.adaptive else None,
        "adaptive": cfg.network.adaptive,
        "accuracy": ev.accuracy,
        "n_flops": ev.flops.n_flops,
        "n_flops_no_bmnet": evaluate(model, test, include_bmnet=False).flops.n_flops,
        "keep_ratio": ev.flops.per_block_keep_ratio,
        "mean_executed_blocks": float(ev.executed_blocks.mean()),
        "grad_l1_mean": [float(v) for v in state.grad_log.mean()],
    }
    if cfg.network.adaptive:
        _, var = sgnet_outputs(model, test.images)
        var = var.numpy()
        rho = stats.spearmanr(var, ev.executed_blocks).statistic
        out.update(
            spearman_var_vs_blocks=float(rho) if np.isfinite(rho) else 0.0,
            dead_blocks=detect_dead_blocks(model, test.images),
            unsaturated_fraction=saturation_fraction(model, test.images),
        )
        if test.hard is not None:
            out["var_easy"] = float(var[~test.hard].mean())
            out["var_hard"] = float(var[test.hard].mean())
            out["blocks_easy"] = float(ev.executed_blocks[~test.hard].mean())
            out["blocks_hard"] = float(ev.executed_blocks[test.hard].mean())
    if metrics_path is not None:
        out["metrics_sha256"] = hashlib.sha256(Path(metrics_path).read_bytes()).hexdigest()
    out["model"] = model
    return out


def run_desk_experiment(out_dir, epochs=40, s_values=(0.2, 0.5, 0.8), seed=0) -> dict:
    """Train the baseline and one adaptive run per s_max; returns summaries keyed by run name."""
    out_dir = Path(out_dir)
    base_cfg = desk_config(adaptive=False, epochs=epochs, seed=seed, output_dir=str(out_dir / "baseline"))
    train, test = load_dataset(base_cfg.data, base_cfg.network)
    results = {"baseline": run_one(base_cfg, train, test, out_dir / "baseline" / "metrics.jsonl")}
    for s in s_values:
        name = f"smax_{s}"
        cfg = desk_config(s_max=s, epochs=epochs, seed=seed, output_dir=str(out_dir / name))
        results[name] = run_one(cfg, train, test, out_dir / name / "metrics.jsonl")
        log.info("%s: %s", name, {k: v for k, v in results[name].items() if k != "model"})
    summary = {k: {kk: vv for kk, vv in v.items() if kk != "model"} for k, v in results.items()}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return results
