"""CIFAR binary-record ingestion and the seeded synthetic dataset."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import DatasetSpec, NetworkConfig
from .errors import ConfigError, IngestionError

CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_FILES = {
    "cifar10-binary": {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    "cifar100-binary": {"train": ["train.bin"], "test": ["test.bin"]},
}


@dataclass
class Dataset:
    images: torch.Tensor          # N x C x H x W float32, normalized
    labels: torch.Tensor          # N int64
    hard: np.ndarray | None = None  # synthetic only: True for high-noise samples

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, n):
        if not n or n >= len(self):
            return self
        hard = None if self.hard is None else self.hard[:n]
        return Dataset(self.images[:n], self.labels[:n], hard)


def normalize(images_01: np.ndarray, mean, std) -> torch.Tensor:
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return torch.from_numpy(((images_01 - mean) / std).astype(np.float32))


def parse_cifar_records(raw: bytes, label_bytes: int, num_classes: int):
    """Split raw CIFAR binary records into (uint8 images N x 3 x 32 x 32, labels).

    The last label byte of each record is the class (the fine label for CIFAR-100).
    """
    rec = label_bytes + CIFAR_IMAGE_BYTES
    if len(raw) == 0:
        raise IngestionError("empty CIFAR file", 0)
    if len(raw) % rec:
        n_full = len(raw) // rec
        raise IngestionError(f"truncated record {n_full}", n_full * rec)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise IngestionError(f"record {i} has label {labels[i]} >= {num_classes}", i * rec + label_bytes - 1)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def _data_root(spec: DatasetSpec) -> Path:
    root = spec.path or os.environ.get("SGAD_DATA_DIR", "")
    if not root:
        raise ConfigError("CIFAR source needs data path or SGAD_DATA_DIR")
    return Path(root)


def load_cifar(spec: DatasetSpec, split="train", num_classes=None) -> Dataset:
    if spec.source not in CIFAR_FILES:
        raise ConfigError(f"{spec.source} is not a CIFAR source")
    label_bytes = 1 if spec.source == "cifar10-binary" else 2
    num_classes = num_classes or (10 if label_bytes == 1 else 100)
    root = _data_root(spec)
    paths = [root] if root.is_file() else [root / f for f in CIFAR_FILES[spec.source][split]]
    images, labels = [], []
    for p in paths:
        try:
            raw = p.read_bytes()
        except FileNotFoundError:
            raise IngestionError(f"missing CIFAR file {p}", 0) from None
        try:
            im, lb = parse_cifar_records(raw, label_bytes, num_classes)
        except IngestionError as e:
            raise IngestionError(f"{p}: {e.args[0].rsplit(' (byte offset', 1)[0]}", e.offset) from None
        images.append(im)
        labels.append(lb)
    mean, std = spec.normalization()
    ds = Dataset(normalize(np.concatenate(images).astype(np.float32) / 255.0, mean, std),
                 torch.from_numpy(np.concatenate(labels)))
    return ds.subset(spec.n_train if split == "train" else spec.n_test)


def _templates(rng, n_classes, channels, size):
    coarse = rng.standard_normal((n_classes, channels, 4, 4)).astype(np.float32)
    t = F.interpolate(torch.from_numpy(coarse), size=(size, size), mode="bilinear", align_corners=False)
    t = t.numpy()
    t -= t.mean(axis=(1, 2, 3), keepdims=True)
    t /= t.std(axis=(1, 2, 3), keepdims=True)
    return t


def synth_dataset(seed, n_samples, n_classes, difficulty_mix=0.5, image_size=16, channels=3,
                  noise=1.0, split="train", mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)) -> Dataset:
    """Class templates plus per-sample distortion; the ``hard`` fraction is heavily distorted.

    Every split of one seed shares the class templates. Easy samples blend at
    most 15% of a distractor class into their template and get light pixel
    noise; hard samples blend 35-55% and get heavy noise, so some of them are
    closer to the distractor than to their own class. ``noise`` scales all
    distortion, so ``noise=0`` yields the bare templates.
    """
    if n_classes < 2:
        raise ConfigError("synthetic data needs at least 2 classes")
    templates = _templates(np.random.default_rng([seed, 0]), n_classes, channels, image_size)
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    hard = rng.random(n_samples) < difficulty_mix
    other = (labels + rng.integers(1, n_classes, n_samples)) % n_classes
    blend = np.where(hard, rng.uniform(0.35, 0.55, n_samples), rng.uniform(0.0, 0.15, n_samples))
    sigma = np.where(hard, 0.9, 0.3)
    eps = rng.standard_normal((n_samples, channels, image_size, image_size)).astype(np.float32)
    max_shift = int(round(2 * noise))
    shifts = rng.integers(-max_shift, max_shift + 1, (n_samples, 2))

    b = (noise * blend).astype(np.float32).reshape(-1, 1, 1, 1)
    x = (1 - b) * templates[labels] + b * templates[other]
    x += (noise * sigma).astype(np.float32).reshape(-1, 1, 1, 1) * eps
    for i in range(n_samples):
        if shifts[i].any():
            x[i] = np.roll(x[i], tuple(shifts[i]), axis=(1, 2))
    images = 0.5 + 0.25 * x
    return Dataset(normalize(images, mean[:channels], std[:channels]), torch.from_numpy(labels.astype(np.int64)), hard)


def load_dataset(spec: DatasetSpec, net: NetworkConfig) -> tuple[Dataset, Dataset]:
    """(train, test) for the configured source."""
    if spec.source == "synthetic":
        mean, std = spec.normalization()
        kw = dict(image_size=net.image_size, channels=net.in_channels, noise=spec.noise_level,
                  mean=mean, std=std)
        return (synth_dataset(spec.data_seed, spec.n_train, net.num_classes, spec.difficulty_mix, split="train", **kw),
                synth_dataset(spec.data_seed, spec.n_test, net.num_classes, spec.difficulty_mix, split="test", **kw))
    if net.image_size != 32 or net.in_channels != 3:
        raise ConfigError("CIFAR sources need image_size=32 and in_channels=3")
    return (load_cifar(spec, "train", net.num_classes), load_cifar(spec, "test", net.num_classes))
