"""Dataset ingestion: IDX files, a synthetic cluster generator, symmetric
label noise, deterministic splits, and train-time augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, float32 in [0, 1]
    labels: np.ndarray  # int64 in [0, num_classes)
    num_classes: int
    clean_labels: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)


@dataclass
class NoiseSpec:
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must be in [0, 1]")


@dataclass
class AugmentSpec:
    horizontal_flip: bool = False
    shift_px: int = 0
    normalize: tuple | None = None  # (per-channel means, per-channel stds)

    def __post_init__(self):
        if not 0 <= self.shift_px <= 4:
            raise ValueError("shift_px must be in [0, 4]")


def inject_label_noise(labels: np.ndarray, epsilon: float, seed: int,
                       num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Replace each label, with probability epsilon, by a uniform draw over
    the other classes. Returns (noisy labels, boolean flip mask)."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    if epsilon > 0 and num_classes < 2:
        raise ValueError("need at least 2 classes to inject noise")
    rng = np.random.default_rng(seed)
    flip = rng.random(labels.shape) < epsilon
    offsets = rng.integers(1, num_classes, size=labels.shape) if num_classes >= 2 \
        else np.zeros(labels.shape, dtype=np.int64)
    noisy = labels.copy()
    noisy[flip] = (labels[flip] + offsets[flip]) % num_classes
    return noisy, flip


def _read_idx_header(blob: bytes, path, expected_magic: int, ndim: int):
    if len(blob) < 4 * (1 + ndim):
        raise IdxFormatError(f"truncated IDX header in {path}")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic != expected_magic:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x} in {path}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    return dims, 4 * (1 + ndim)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse the standard big-endian IDX pair (u8 images, u8 labels)."""
    img_blob = Path(images_path).read_bytes()
    (n, h, w), offset = _read_idx_header(img_blob, images_path, IDX_IMAGE_MAGIC, 3)
    if len(img_blob) - offset != n * h * w:
        raise IdxFormatError(f"image payload size mismatch in {images_path}")
    images = np.frombuffer(img_blob, dtype=np.uint8, offset=offset).reshape(n, 1, h, w)

    lab_blob = Path(labels_path).read_bytes()
    (n_lab,), offset = _read_idx_header(lab_blob, labels_path, IDX_LABEL_MAGIC, 1)
    if len(lab_blob) - offset != n_lab:
        raise IdxFormatError(f"label payload size mismatch in {labels_path}")
    if n_lab != n:
        raise IdxFormatError(f"image/label count mismatch: {n} vs {n_lab}")
    labels = np.frombuffer(lab_blob, dtype=np.uint8, offset=offset).astype(np.int64)

    num_classes = int(labels.max()) + 1 if n else 0
    return Dataset(images=(images / np.float32(255.0)).astype(np.float32),
                   labels=labels, num_classes=num_classes)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a Dataset back out as an IDX pair (single-channel u8 images)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w)
                                  + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


def synth_clusters(n: int, num_classes: int, shape, separation: float, seed: int,
                   modes_per_class: int = 1) -> Dataset:
    """Gaussian clusters squashed into [0, 1]; labels follow the cluster.

    `shape` is either a flat input dimension or a (C, H, W) image shape.
    With `modes_per_class` > 1 each class is a mixture, which makes the task
    non-linear and memorization of noisy labels more damaging.
    """
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    if isinstance(shape, int):
        dims = (1, 1, shape)
    else:
        dims = tuple(shape)
        if len(dims) != 3:
            raise ValueError("image shape must be (C, H, W)")
    dim = int(np.prod(dims))
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(num_classes * modes_per_class, dim))
    labels = rng.integers(0, num_classes * modes_per_class, size=n)
    raw = centers[labels] * separation + rng.normal(0.0, 1.0, size=(n, dim))
    images = (1.0 / (1.0 + np.exp(-raw / 2.0))).astype(np.float32).reshape(n, *dims)
    return Dataset(images=images, labels=(labels // modes_per_class).astype(np.int64),
                   num_classes=num_classes)


def split(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive, seeded shuffle split into (train, val)."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    n = len(dataset)
    n_val = int(n * val_fraction)
    if n_val == 0 or n_val == n:
        raise ValueError(f"degenerate split: {n} samples at fraction {val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]

    def take(idx):
        return Dataset(images=dataset.images[idx], labels=dataset.labels[idx],
                       num_classes=dataset.num_classes,
                       clean_labels=None if dataset.clean_labels is None
                       else dataset.clean_labels[idx])

    return take(train_idx), take(val_idx)


def normalize(batch: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    if spec.normalize is None:
        return batch
    mean, std = spec.normalize
    mean = np.asarray(mean, dtype=batch.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=batch.dtype).reshape(1, -1, 1, 1)
    return (batch - mean) / std


def augment(batch: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-sample flip and integer shift with zero padding, then normalization.

    Shifting off the edge loses those pixels; shifting back does not restore
    them (zero padding semantics).
    """
    if batch.ndim != 4:
        raise ValueError("augment expects an N x C x H x W batch")
    out = batch
    if spec.horizontal_flip or spec.shift_px:
        out = batch.copy()
        n = len(batch)
        if spec.horizontal_flip:
            flips = rng.random(n) < 0.5
            out[flips] = out[flips, :, :, ::-1]
        if spec.shift_px:
            shifts = rng.integers(-spec.shift_px, spec.shift_px + 1, size=(n, 2))
            for i in range(n):
                dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
                if dy or dx:
                    shifted = np.zeros_like(out[i])
                    h, w = out.shape[2], out.shape[3]
                    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
                    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
                    shifted[:, yd, xd] = out[i][:, ys, xs]
                    out[i] = shifted
    return normalize(out, spec)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over a stack of images."""
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)
