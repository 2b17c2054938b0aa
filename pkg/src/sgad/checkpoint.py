"""Checkpoint directories: ``manifest.json`` plus one tensor file per parameter group.

Tensor file layout (all little-endian)::

    b"SGT1" | uint32 count | count x (uint16 name_len | name utf-8 |
                                     uint8 ndim | uint32 dims[ndim] | float32 data)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import INIT_SCHEME
from .config import ExperimentConfig
from .errors import SGADError
from .model import SGADModel

MAGIC = b"SGT1"
FORMAT = "sgad-checkpoint/1"


class CheckpointError(SGADError):
    pass


def write_tensor_file(path, tensors: dict[str, torch.Tensor]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor_file(path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(path, model: SGADModel, cfg: ExperimentConfig, state=None, kind="training") -> Path:
    """Write ``model`` (and optionally optimizer/training state) under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    groups = {}
    for name, module in model.parameter_groups().items():
        fname = f"{name}.bin"
        sd = module.state_dict()
        write_tensor_file(path / fname, sd)
        groups[name] = {"file": fname, "sha256": _sha256(path / fname),
                        "tensors": {k: list(v.shape) for k, v in sd.items()}}
    manifest = {
        "format": FORMAT,
        "kind": kind,
        "version": __version__,
        "init_scheme": INIT_SCHEME,
        "config": cfg.to_dict(),
        "groups": groups,
    }
    if state is not None:
        names = {p: n for n, p in model.named_parameters()}
        momentum = {}
        for p, st in state.optimizer.state.items():
            buf = st.get("momentum_buffer")
            if buf is not None:
                momentum[names[p]] = buf
        write_tensor_file(path / "optimizer.bin", momentum)
        manifest["state"] = {
            "epoch": state.epoch,
            "step": state.step,
            "seed": cfg.train.seed,
            "grad_log": state.grad_log.state_dict(),
            "optimizer_file": "optimizer.bin",
        }
    else:
        stale = path / "optimizer.bin"
        if stale.exists():
            stale.unlink()
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest in {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_model(path) -> tuple[SGADModel, ExperimentConfig, dict]:
    """Rebuild the model stored at ``path``; returns (model, config, manifest)."""
    path = Path(path)
    manifest = read_manifest(path)
    cfg = ExperimentConfig.from_dict(manifest["config"])
    with torch.random.fork_rng(devices=[]):
        model = SGADModel(cfg.network, with_sgnet="sgnet" in manifest["groups"])
    modules = model.parameter_groups()
    if set(modules) != set(manifest["groups"]):
        raise CheckpointError(f"{path}: parameter groups do not match the network config")
    for name, info in manifest["groups"].items():
        fpath = path / info["file"]
        if _sha256(fpath) != info["sha256"]:
            raise CheckpointError(f"{fpath}: checksum mismatch")
        modules[name].load_state_dict(read_tensor_file(fpath))
    return model, cfg, manifest


def load_state(path, cfg: ExperimentConfig | None = None):
    """Resume a training state; ``cfg`` overrides the stored config if given."""
    from .trainer import TrainState, make_optimizer

    model, stored, manifest = load_model(path)
    if "state" not in manifest:
        raise CheckpointError(f"{path}: checkpoint carries no training state")
    cfg = cfg or stored
    opt = make_optimizer(model, cfg.train)
    params = dict(model.named_parameters())
    for name, buf in read_tensor_file(Path(path) / manifest["state"]["optimizer_file"]).items():
        opt.state[params[name]]["momentum_buffer"] = buf.clone()
    st = manifest["state"]
    state = TrainState(model, opt, cfg, epoch=st["epoch"], step=st["step"])
    state.grad_log.load_state_dict(st["grad_log"])
    return state


def warm_start(model: SGADModel, path):
    """Copy parameters from another checkpoint of the same architecture (LF from MF)."""
    src, _, _ = load_model(path)
    missing = model.load_state_dict(src.state_dict(), strict=False)
    if missing.unexpected_keys or [k for k in missing.missing_keys if not k.startswith("sgnet.")]:
        raise CheckpointError(f"warm start from {path}: architecture mismatch")
    return model
