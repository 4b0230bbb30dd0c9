"""32x32 RGB datasets: a seeded synthetic generator and the CIFAR-10 binary reader."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SHAPE = (32, 32, 3)
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_CLASSES = 10

# one hue and one preferred rectangle centre per class
_PALETTE = np.array([
    [0.95, 0.15, 0.15], [0.15, 0.85, 0.2], [0.2, 0.3, 0.95], [0.95, 0.9, 0.15],
    [0.85, 0.2, 0.9], [0.15, 0.9, 0.9], [0.95, 0.55, 0.1], [0.55, 0.55, 0.55],
])
_CENTRES = np.array([
    [10, 10], [10, 22], [22, 10], [22, 22], [16, 8], [16, 24], [8, 16], [24, 16],
])


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise ValueError(f"images must be (K, 32, 32, 3), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.labels) < 1:
            raise ValueError("need K >= 1 images with one label each")
        if self.labels.max() >= self.num_classes or self.labels.min() < 0:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def synth_dataset(seed: int, n_per_class: int, num_classes: int = 3) -> Dataset:
    """Coloured rectangles whose hue and position depend on the class, plus noise."""
    if not 1 <= num_classes <= len(_PALETTE):
        raise ValueError(f"num_classes must be in [1, {len(_PALETTE)}], got {num_classes}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    k = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = np.full((k,) + IMAGE_SHAPE, 0.1)
    for n, c in enumerate(labels):
        cy, cx = _CENTRES[c] + rng.integers(-3, 4, size=2)
        hh, hw = rng.integers(3, 7, size=2)
        shade = rng.uniform(0.8, 1.0)
        images[n, max(cy - hh, 0):cy + hh, max(cx - hw, 0):cx + hw] = _PALETTE[c] * shade
    images += rng.uniform(-0.05, 0.05, size=images.shape)
    order = rng.permutation(k)
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32)[order], labels[order], num_classes)


def load_cifar_binary(path) -> Dataset:
    """Read CIFAR-10 binary records: a label byte then planar R, G, B 32x32 bytes."""
    raw = Path(path).read_bytes()
    if not raw:
        raise ValueError(f"{path}: empty file")
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise ValueError(
            f"{path}: truncated record {whole} at byte offset {whole * CIFAR_RECORD} "
            f"({len(raw) - whole * CIFAR_RECORD} of {CIFAR_RECORD} bytes)"
        )
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise ValueError(f"{path}: label {labels[bad[0]]} >= 10 in record {bad[0]} "
                         f"at byte offset {bad[0] * CIFAR_RECORD}")
    planes = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = (planes.astype(np.float32) / np.float32(255.0))
    return Dataset(images, labels, CIFAR_CLASSES)


def write_cifar_binary(path, images_u8: np.ndarray, labels) -> None:
    """Inverse of :func:`load_cifar_binary` for uint8 ``(K, 32, 32, 3)`` images."""
    planes = np.asarray(images_u8, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(labels), -1)
    recs = np.concatenate([np.asarray(labels, np.uint8)[:, None], planes], axis=1)
    Path(path).write_bytes(recs.tobytes())
