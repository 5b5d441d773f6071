"""Datasets: procedural shapes, CIFAR-10 binary batches, and a two-mode toy set."""
from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np

SHAPES = ("square", "disc", "triangle", "hbar", "vbar")
PALETTES = {
    0: ((0.85, 0.35, 0.15), (0.95, 0.75, 0.2)),   # warm
    1: ((0.15, 0.45, 0.9), (0.2, 0.8, 0.75)),     # cool
}
CIFAR_RECORD = 1 + 3072
CIFAR_PER_FILE = 10000


@dataclass
class LabeledImages:
    images: np.ndarray   # (n, H, W, C) float
    labels: np.ndarray   # (n,) int
    num_classes: int
    mean: np.ndarray = None
    std: np.ndarray = None

    def __len__(self) -> int:
        return len(self.labels)

    def normalized(self, mean=None, std=None) -> "LabeledImages":
        """Per-channel standardization; statistics default to this split's own."""
        if mean is None:
            mean = self.images.mean(axis=(0, 1, 2))
            std = self.images.std(axis=(0, 1, 2))
        std = np.where(std > 1e-8, std, 1.0)
        imgs = ((self.images - mean) / std).astype(np.float32)
        return LabeledImages(imgs, self.labels, self.num_classes, np.asarray(mean), np.asarray(std))

    def denormalize(self, images) -> np.ndarray:
        if self.mean is None:
            return np.asarray(images)
        return np.asarray(images) * self.std + self.mean

    def subset(self, idx) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx], self.num_classes, self.mean, self.std)


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        # apex up; width grows linearly towards the base
        return (dy >= -r) & (dy <= r * 0.8) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r)
    raise ValueError(kind)


def render_shape(index: int, classes: int, size: int, seed: int):
    """One procedural image, fully determined by ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    label = index % classes
    kind = SHAPES[label % len(SHAPES)]
    lo, hi = PALETTES[(label // len(SHAPES)) % 2]
    mix = rng.uniform()
    color = np.array(lo) * (1 - mix) + np.array(hi) * mix
    bg = rng.uniform(0.05, 0.45) * np.ones(3) + rng.uniform(-0.05, 0.05, size=3)
    r = rng.uniform(0.22, 0.36) * size
    cy = rng.uniform(r, size - r)
    cx = rng.uniform(r, size - r)
    img = np.empty((size, size, 3))
    img[:] = bg
    img[_shape_mask(kind, size, cy, cx, r)] = color
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0), label


def synth_shapes(n: int, classes: int = 10, size: int = 32, seed: int = 0, start: int = 0) -> LabeledImages:
    """Images ``start .. start + n - 1``; class ``i % classes`` (shape type, then palette)."""
    if not 1 <= classes <= 10:
        raise ValueError(f"classes must lie in 1..10, got {classes}")
    imgs = np.empty((n, size, size, 3))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        imgs[i], labels[i] = render_shape(start + i, classes, size, seed)
    return LabeledImages(imgs, labels, classes)


def two_mode(n: int, seed: int = 0) -> LabeledImages:
    """2x2 single-channel images equal to +v or -v, v = (1, -1, -1, 1), chosen per index."""
    v = np.array([1.0, -1.0, -1.0, 1.0]).reshape(2, 2, 1)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    imgs = np.where(labels[:, None, None, None] == 0, v, -v)
    return LabeledImages(imgs.astype(np.float64), labels.astype(np.int64), 2)


def two_mode_assign(samples) -> np.ndarray:
    """Nearest-mode label (0 for +v, 1 for -v) of each sampled 2x2 image."""
    v = np.array([1.0, -1.0, -1.0, 1.0])
    proj = np.asarray(samples).reshape(len(samples), -1) @ v
    return (proj < 0).astype(np.int64)


# ---------------------------------------------------------------- CIFAR-10

def read_cifar10_file(path) -> tuple:
    """Decode one binary batch: records of 1 label byte + 3072 planar RGB bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise ValueError(f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} out of range")
    imgs = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return imgs, labels


def load_cifar10_binary(root, split: str = "train", limit: int | None = None, strict: bool = True) -> LabeledImages:
    """Load ``data_batch_*.bin`` (train) or ``test_batch.bin`` (test) from ``root``.

    ``limit`` selects an evenly strided subset.  With ``strict`` every file
    must hold exactly 10,000 records.
    """
    pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
    files = sorted(glob.glob(os.path.join(root, pattern)))
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches under {root}")
    imgs, labels = [], []
    for f in files:
        x, y = read_cifar10_file(f)
        if strict and len(y) != CIFAR_PER_FILE:
            raise ValueError(f"{f}: expected {CIFAR_PER_FILE} records, found {len(y)}")
        imgs.append(x)
        labels.append(y)
    x = np.concatenate(imgs)
    y = np.concatenate(labels)
    if limit is not None and limit < len(y):
        idx = np.arange(limit) * (len(y) // limit)
        x, y = x[idx], y[idx]
    return LabeledImages(x.astype(np.float64) / 255.0, y, 10)


@dataclass
class DatasetSpec:
    source: str = "synthetic-shapes"
    root: str = ""
    classes: int = 10
    n_train: int = 1000
    n_eval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic-shapes", "cifar10-binary", "toy-two-mode"):
            raise ValueError(f"unknown dataset source {self.source!r}")


def load_splits(spec: DatasetSpec, image_size: int = 32):
    """(train, eval) splits, both standardized with the training statistics."""
    if spec.source == "synthetic-shapes":
        tr = synth_shapes(spec.n_train, spec.classes, image_size, spec.seed)
        ev = synth_shapes(spec.n_eval, spec.classes, image_size, spec.seed, start=10_000_000)
    elif spec.source == "cifar10-binary":
        if image_size != 32:
            raise ValueError("CIFAR-10 images are 32x32")
        tr = load_cifar10_binary(spec.root, "train", spec.n_train)
        ev = load_cifar10_binary(spec.root, "test", spec.n_eval)
    else:
        tr = two_mode(spec.n_train, spec.seed)
        ev = two_mode(spec.n_eval, spec.seed + 1)
        return tr, ev
    tr = tr.normalized()
    ev = ev.normalized(tr.mean, tr.std)
    return tr, ev
