"""Datasets: synthetic spiral / blobs, CIFAR-10 binary batches, byte text."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_RECORDS_PER_BATCH = 10000


class DatasetError(ValueError):
    pass


def spiral(samples_per_class: int, classes: int = 3, noise: float = 0.2, turns: float = 1.0,
           seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Interleaved 2-D spiral arms, one per class."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(classes):
        r = np.linspace(0.05, 1.0, samples_per_class)
        theta = c * 2.0 * np.pi / classes + turns * 2.0 * np.pi * r + rng.normal(0.0, noise, samples_per_class)
        xs.append(np.stack([r * np.sin(theta), r * np.cos(theta)], axis=1))
        ys.append(np.full(samples_per_class, c))
    return np.concatenate(xs), np.concatenate(ys)


def blobs(samples_per_class: int, classes: int = 3, features: int = 2, spread: float = 1.0,
          seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian clusters with centres drawn in ``[-5, 5]^features``."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-5.0, 5.0, (classes, features))
    x = np.concatenate([rng.normal(c, spread, (samples_per_class, features)) for c in centres])
    y = np.repeat(np.arange(classes), samples_per_class)
    return x, y


def load_cifar_batch(path, expect_records: int | None = CIFAR_RECORDS_PER_BATCH
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch into ``(images (N, 32, 32, 3) in [0, 1], labels)``.

    Each record is one label byte followed by 1024 red, 1024 green and 1024
    blue pixel bytes.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD * CIFAR_RECORD
        raise DatasetError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}; "
                           f"partial record at byte offset {whole}")
    records = raw.reshape(-1, CIFAR_RECORD)
    if expect_records is not None and len(records) != expect_records:
        raise DatasetError(f"{path}: {len(records)} records, expected {expect_records}")
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def load_cifar_dir(root, max_records: int = 0):
    root = Path(root)
    train = sorted(root.glob("data_batch_*.bin"))
    if not train:
        raise DatasetError(f"no data_batch_*.bin files under {root}")
    parts = [load_cifar_batch(p) for p in train]
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    test = root / "test_batch.bin"
    xt, yt = load_cifar_batch(test) if test.exists() else (None, None)
    if max_records:
        x, y = x[:max_records], y[:max_records]
    return (x, y), (xt, yt)


def random_crop_flip(images: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Per-image random ``crop x crop`` window and horizontal flip with p = 0.5."""
    n, h, w = images.shape[:3]
    out = np.empty((n, crop, crop) + images.shape[3:], dtype=images.dtype)
    top = rng.integers(0, h - crop + 1, n)
    left = rng.integers(0, w - crop + 1, n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        patch = images[i, top[i]:top[i] + crop, left[i]:left[i] + crop]
        out[i] = patch[:, ::-1] if flip[i] else patch
    return out


def load_text(path) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)
    if data.size < 2:
        raise DatasetError(f"{path}: need at least two bytes of text")
    return data


@dataclass
class Dataset:
    """In-memory dataset with deterministic batch sampling."""

    kind: str
    x: np.ndarray
    y: np.ndarray | None = None
    batch_size: int = 0
    seq_len: int = 32
    crop: int = 0

    def batch(self, rng: np.random.Generator):
        if self.kind == "text":
            n = max(self.batch_size, 1)
            span = self.seq_len + 1
            starts = rng.integers(0, max(self.x.size - span, 0) + 1, n)
            idx = starts[:, None] + np.arange(min(span, self.x.size))
            return self.x[idx]
        if not self.batch_size or self.batch_size >= len(self.x):
            x, y = self.x, self.y
        else:
            idx = rng.choice(len(self.x), self.batch_size, replace=False)
            x, y = self.x[idx], self.y[idx]
        if self.crop:
            x = random_crop_flip(x, self.crop, rng)
        return x, y

    def full(self):
        if self.kind == "text":
            return self.x[None, : self.seq_len * 8 + 1]
        return self.x, self.y
