"""Command-line entry point: ``sgad --command {train,eval,analyze,prune,export,report}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import fcntl
import json
import logging
import sys
from pathlib import Path

from .analysis import count_parameters, detect_dead_blocks, export_inference_model, prune_dead_blocks
from .checkpoint import load_model, load_state, save_checkpoint, warm_start
from .config import ExperimentConfig, load_config
from .data import load_dataset
from .errors import SGADError
from .model import SGADModel
from .trainer import MetricsWriter, TrainState, evaluate, fit, header_record

log = logging.getLogger("sgad")

COMMANDS = ("train", "eval", "analyze", "prune", "export", "report")


class UsageError(SGADError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgad", description=__doc__)
    p.add_argument("--command", required=True, choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the training and initialization seed")
    p.add_argument("--smax", type=float, help="overrides s_max")
    p.add_argument("--mapping-mode", choices=("consistent", "paper-literal"))
    p.add_argument("--include-bmnet-flops", type=_bool, default=True)
    p.add_argument("--resume", help="training checkpoint directory to continue from")
    p.add_argument("--checkpoint", help="checkpoint to read (default: <output_dir>/checkpoint)")
    p.add_argument("--output-dir", help="overrides output_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(train={"seed": args.seed}, network={"init_seed": args.seed})
    if args.smax is not None:
        cfg = cfg.replace(mapping={"s_max": args.smax})
    if args.mapping_mode:
        cfg = cfg.replace(mapping={"mode": args.mapping_mode})
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    return cfg


@contextlib.contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    fh = open(out_dir / ".sgad.lock", "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        fh.close()
        raise UsageError(f"{out_dir} is in use by another sgad process") from None
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: ExperimentConfig, args, out: Path):
    train, test = load_dataset(cfg.data, cfg.network)
    metrics = out / "metrics.jsonl"
    if args.resume:
        state = load_state(args.resume, cfg)
        writer = MetricsWriter(metrics, append=metrics.exists())
        if not metrics.exists() or metrics.stat().st_size == 0:
            writer.write(header_record(cfg))
    else:
        model = SGADModel.build(cfg.network)
        if cfg.train.init_from:
            warm_start(model, cfg.train.init_from)
        state = TrainState.fresh(cfg, model)
        writer = MetricsWriter(metrics)
        writer.write(header_record(cfg))

    def checkpoint(st, _rec):
        save_checkpoint(out / "checkpoint", st.model, cfg, st)

    try:
        fit(state, train, test, writer, on_epoch_end=checkpoint, include_bmnet=args.include_bmnet_flops)
    finally:
        writer.close()
    save_checkpoint(out / "checkpoint", state.model, cfg, state)
    ev = evaluate(state.model, test, args.include_bmnet_flops, cfg.train.eval_batch_size)
    _dump_json(out / "eval_report.json", ev.to_dict())
    print(f"accuracy {ev.accuracy:.4f}  n-FLOPs {ev.flops.n_flops:.4f}")


def _checkpoint_path(args, cfg) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "checkpoint"


def _load(args, cfg):
    model, stored, manifest = load_model(_checkpoint_path(args, cfg))
    # dataset and output settings come from the invocation; the network from the checkpoint
    merged = dataclasses.replace(cfg, network=stored.network)
    return model, merged, manifest


def cmd_eval(cfg, args, out: Path):
    model, cfg, _ = _load(args, cfg)
    _, test = load_dataset(cfg.data, cfg.network)
    ev = evaluate(model, test, args.include_bmnet_flops, cfg.train.eval_batch_size)
    _dump_json(out / "eval_report.json", ev.to_dict())
    print(f"accuracy {ev.accuracy:.4f}  n-FLOPs {ev.flops.n_flops:.4f}")


def cmd_analyze(cfg, args, out: Path):
    model, cfg, manifest = _load(args, cfg)
    _, test = load_dataset(cfg.data, cfg.network)
    ev = evaluate(model, test, args.include_bmnet_flops, cfg.train.eval_batch_size)
    grad = manifest.get("state", {}).get("grad_log", {})
    count = grad.get("count", 0)
    means = [t / count for t in grad["total"]] if count else [0.0] * model.num_blocks
    rep = ev.flops
    with open(out / "analysis.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "origin", "grad_l1_mean", "keep_ratio", "macs", "forced"])
        for i in range(model.num_blocks):
            w.writerow([i, rep.block_origins[i], repr(means[i]), repr(rep.per_block_keep_ratio[i]),
                        rep.per_block_macs[i], int(i in model.forced)])
    _dump_json(out / "flops_report.json", rep.to_dict())
    print(f"wrote {out / 'analysis.csv'}; dead blocks {rep.dead_blocks}")


def cmd_prune(cfg, args, out: Path):
    model, cfg, manifest = _load(args, cfg)
    _, test = load_dataset(cfg.data, cfg.network)
    dead = detect_dead_blocks(model, test.images, cfg.train.eval_batch_size)
    pruned = prune_dead_blocks(model, dead, test.images, cfg.train.eval_batch_size)
    kind = manifest.get("kind", "training")
    save_checkpoint(out / "pruned", pruned, dataclasses.replace(cfg, network=pruned.cfg), kind=kind)
    _dump_json(out / "prune_report.json", {
        "dead_blocks": dead,
        "params_before": count_parameters(model),
        "params_after": count_parameters(pruned),
    })
    print(f"pruned blocks {dead}; parameters {count_parameters(model)} -> {count_parameters(pruned)}")


def cmd_export(cfg, args, out: Path):
    model, cfg, _ = _load(args, cfg)
    save_checkpoint(out / "inference", export_inference_model(model), cfg, kind="inference")
    print(f"wrote {out / 'inference'}")


def cmd_report(cfg, args, out: Path):
    steps, epochs = [], []
    with open(out / "metrics.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["kind"] == "step":
                steps.append(rec)
            elif rec["kind"] == "epoch":
                epochs.append(rec)
    with open(out / "report_steps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "lr", "R_prime", "R_m", "R_g", "total", "mean_keep"])
        for r in steps:
            l = r["losses"]
            w.writerow([r["epoch"], r["step"], r["lr"], l["R_prime"], l["R_m"], l["R_g"], l["total"],
                        sum(r["rats_b"]) / len(r["rats_b"])])
    with open(out / "report_epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "accuracy", "sgnet_accuracy", "n_flops", "mean_executed_blocks"])
        for r in epochs:
            w.writerow([r["epoch"], r["lr"], r.get("accuracy", ""), r.get("sgnet_accuracy", ""),
                        r.get("n_flops", ""), r.get("mean_executed_blocks", "")])
    print(f"{len(steps)} step rows, {len(epochs)} epoch rows")


HANDLERS = {
    "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
    "prune": cmd_prune, "export": cmd_export, "report": cmd_report,
}


def run(command: str, args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.output_dir)
    with output_lock(out):
        HANDLERS[command](cfg, args, out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args.command, args)
    except (SGADError, FileNotFoundError) as e:
        print(f"sgad: error: {e}", file=sys.stderr)
        return 2 if isinstance(e, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
