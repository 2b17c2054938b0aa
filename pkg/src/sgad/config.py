"""Configuration dataclasses and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field

from .errors import ConfigError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)


@dataclass(frozen=True)
class BlockConfig:
    index: int
    in_channels: int
    out_channels: int
    spatial_stride: int
    conv_kernel: int
    # index in the unpruned network; equals ``index`` unless blocks were pruned
    origin: int = -1

    @property
    def changes_shape(self) -> bool:
        return self.in_channels != self.out_channels or self.spatial_stride != 1


@dataclass(frozen=True)
class NetworkConfig:
    """CIFAR-style residual backbone plus the BMNet/SGNet side networks.

    The backbone has ``len(widths)`` C-blocks of ``blocks_per_stage`` residual
    blocks each, so the unpruned block count is ``L = len(widths) * blocks_per_stage``
    and the conventional depth is ``2 * L + 2``.
    """

    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 5
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    conv_kernel: int = 3
    bmnet_channels: int = 8
    bmnet_grid: int = 8
    sgnet_widths: tuple[int, ...] = (16, 16, 32, 32)
    adaptive: bool = True
    pruned_blocks: tuple[int, ...] = ()
    init_seed: int = 0

    def __post_init__(self):
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must strictly increase across C-blocks, got {self.widths}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.full_num_blocks < 2:
            raise ConfigError("the backbone needs at least 2 blocks")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be a positive odd integer")
        if self.image_size < 2 ** (len(self.widths) - 1):
            raise ConfigError("image_size too small for the number of stride-2 stages")
        if len(self.sgnet_widths) != 4:
            raise ConfigError("sgnet_widths must list 4 conv layer widths")
        bad = [i for i in self.pruned_blocks if not 0 <= i < self.full_num_blocks]
        if bad or len(set(self.pruned_blocks)) != len(self.pruned_blocks):
            raise ConfigError(f"invalid pruned_blocks {self.pruned_blocks}")

    @classmethod
    def from_depth(cls, depth: int, **kw) -> "NetworkConfig":
        widths = tuple(kw.pop("widths", (16, 32, 64)))
        per = (depth - 2) / (2 * len(widths))
        if per != int(per) or per < 1:
            raise ConfigError(f"depth {depth} is not 2*{len(widths)}*n+2")
        return cls(widths=widths, blocks_per_stage=int(per), **kw)

    @property
    def full_num_blocks(self) -> int:
        return len(self.widths) * self.blocks_per_stage

    @property
    def num_blocks(self) -> int:
        return self.full_num_blocks - len(self.pruned_blocks)

    @property
    def depth(self) -> int:
        return 2 * self.full_num_blocks + 2

    def all_blocks(self) -> list[BlockConfig]:
        out = []
        c_in = self.widths[0]
        for s, w in enumerate(self.widths):
            for j in range(self.blocks_per_stage):
                i = len(out)
                stride = 2 if (j == 0 and s > 0) else 1
                out.append(BlockConfig(i, c_in, w, stride, self.conv_kernel, origin=i))
                c_in = w
        return out

    def blocks(self) -> list[BlockConfig]:
        """Surviving blocks, re-indexed from 0 after pruning."""
        dead = set(self.pruned_blocks)
        kept = [b for b in self.all_blocks() if b.origin not in dead]
        return [dataclasses.replace(b, index=k) for k, b in enumerate(kept)]

    def forced_blocks(self) -> tuple[int, ...]:
        """Blocks whose mask bit is always 1: shape-changing blocks and the last block."""
        blocks = self.blocks()
        return tuple(b.index for b in blocks if b.changes_shape or b.index == len(blocks) - 1)


@dataclass(frozen=True)
class MappingConfig:
    s_max: float = 0.2
    num_blocks: int = 15
    num_classes: int = 10
    mode: str = "consistent"

    def __post_init__(self):
        if not 0.0 < self.s_max < 1.0:
            raise ConfigError(f"s_max must lie in (0, 1), got {self.s_max}")
        if self.mode not in ("consistent", "paper-literal"):
            raise ConfigError(f"unknown mapping mode {self.mode!r}")
        if self.num_blocks < 2 or self.num_classes < 2:
            raise ConfigError("mapping needs num_blocks >= 2 and num_classes >= 2")

    @property
    def scale(self) -> float:
        target = 1.0 - self.s_max if self.mode == "consistent" else self.s_max
        return -self.num_classes * math.log(target) / math.log(self.num_blocks)


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_start: float = 0.0
    sigma_end: float = 3.0
    ramp_epochs: int = 147

    def __post_init__(self):
        if self.sigma_start < 0 or self.sigma_end < 0:
            raise ConfigError("noise sigmas must be >= 0")
        if self.sigma_end < self.sigma_start:
            raise ConfigError("sigma_end < sigma_start would make the noise schedule decrease")
        if self.ramp_epochs < 1:
            raise ConfigError("ramp_epochs must be >= 1")

    def sigma(self, epoch: float) -> float:
        frac = min(max(epoch, 0.0) / self.ramp_epochs, 1.0)
        return self.sigma_start + (self.sigma_end - self.sigma_start) * frac


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    alpha_m: float = 1.0
    alpha_g: float = 0.3

    def __post_init__(self):
        if min(self.alpha, self.alpha_m, self.alpha_g) < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 220
    batch_size: int = 128
    base_lr: float = 0.1
    decay_epochs: tuple[int, ...] = (128, 160, 192)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    # None: 160 for a 220-epoch run, scaled proportionally otherwise
    grad_log_start_epoch: typing.Optional[int] = None
    augment: bool = False
    init_from: str = ""
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(not 0 <= e < self.epochs for e in d):
            raise ConfigError(f"decay_epochs must be strictly increasing within [0, epochs): {d}")

    @property
    def grad_log_start(self) -> int:
        if self.grad_log_start_epoch is not None:
            return self.grad_log_start_epoch
        return int(round(self.epochs * 160 / 220))

    @classmethod
    def scaled(cls, epochs: int, **kw) -> "TrainConfig":
        """Shorter run with the 128/160/192-of-220 decay points rescaled."""
        decay = tuple(int(round(epochs * e / 220)) for e in (128, 160, 192))
        return cls(epochs=epochs, decay_epochs=decay, **kw)


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    path: str = ""
    data_seed: int = 0
    n_train: int = 5000
    n_test: int = 1000
    difficulty_mix: float = 0.5
    noise_level: float = 1.0
    # empty: per-source default constants
    norm_mean: tuple[float, ...] = ()
    norm_std: tuple[float, ...] = ()

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10-binary", "cifar100-binary"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if not 0.0 <= self.difficulty_mix <= 1.0:
            raise ConfigError("difficulty_mix must lie in [0, 1]")

    def normalization(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        if self.norm_mean and self.norm_std:
            return self.norm_mean, self.norm_std
        if self.source == "cifar10-binary":
            return CIFAR10_MEAN, CIFAR10_STD
        if self.source == "cifar100-binary":
            return CIFAR100_MEAN, CIFAR100_STD
        return (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)


_SECTIONS = {
    "network": NetworkConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "mapping": MappingConfig,
    "noise": NoiseSchedule,
    "data": DatasetSpec,
}
# mapping sizes are derived from the network, never set directly
_DERIVED = {("mapping", "num_blocks"), ("mapping", "num_classes")}
_RENAMED = {("mapping", "mode"): "mapping_mode"}


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    output_dir: str = "runs/default"

    def __post_init__(self):
        m = self.mapping
        if (m.num_blocks, m.num_classes) != (self.network.num_blocks, self.network.num_classes):
            object.__setattr__(self, "mapping", dataclasses.replace(
                m, num_blocks=self.network.num_blocks, num_classes=self.network.num_classes))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kw = {}
        for name, klass in _SECTIONS.items():
            if name in d:
                kw[name] = klass(**{k: _coerce_json(klass, k, v) for k, v in d[name].items()})
        if "output_dir" in d:
            kw["output_dir"] = d["output_dir"]
        return cls(**kw)

    def replace(self, **sections) -> "ExperimentConfig":
        """``cfg.replace(train={"epochs": 3}, output_dir="x")``."""
        kw = {}
        for name, val in sections.items():
            if name in _SECTIONS and isinstance(val, dict):
                val = dataclasses.replace(getattr(self, name), **val)
            kw[name] = val
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for key, (section, fname) in sorted(config_keys().items()):
            val = getattr(getattr(self, section), fname)
            lines.append(f"{key} = {_format_value(val)}")
        lines.append(f"output_dir = {self.output_dir}")
        return "\n".join(lines) + "\n"


def config_keys() -> dict[str, tuple[str, str]]:
    """Flat key -> (section, field) for every settable option."""
    keys = {}
    for section, klass in _SECTIONS.items():
        for f in dataclasses.fields(klass):
            if (section, f.name) in _DERIVED:
                continue
            keys[_RENAMED.get((section, f.name), f.name)] = (section, f.name)
    return keys


def _field_type(klass, name):
    return typing.get_type_hints(klass)[name]


def _parse_value(tp, raw: str, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union:
            if raw.lower() in ("", "none"):
                return None
            return _parse_value(next(a for a in args if a is not type(None)), raw, key)
        if origin is tuple:
            if not raw:
                return ()
            return tuple(_parse_value(args[0], p, key) for p in raw.split(","))
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except (ValueError, StopIteration):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _coerce_json(klass, name, value):
    tp = _field_type(klass, name)
    if typing.get_origin(tp) is tuple and value is not None:
        return tuple(value)
    return value


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    keys = config_keys()
    updates: dict[str, dict] = {}
    output_dir = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "output_dir":
            output_dir = raw
            continue
        if key not in keys:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, fname = keys[key]
        tp = _field_type(_SECTIONS[section], fname)
        updates.setdefault(section, {})[fname] = _parse_value(tp, raw, key)
    cfg = base or ExperimentConfig()
    if output_dir is not None:
        updates["output_dir"] = output_dir
    return cfg.replace(**updates)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())
