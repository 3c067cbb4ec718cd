"""Dataset ingestion and deterministic batching.

Parsers accept raw (non-gzipped) bytes for the IDX image/label format and
the CIFAR-10 binary batch format, both validated defensively: any
malformed header or truncated payload raises a typed format error rather
than crashing.  A synthetic Gaussian-blob generator provides a fast,
fully seeded substrate for property tests and desk-scale runs.

Pixel scaling is a bare /255.0 (no mean normalization).  The train/val
split used by the patience rule takes the last 10% of the training set in
original order, deterministically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import DataFormatError, ShapeError

__all__ = [
    "Dataset",
    "parse_idx",
    "parse_cifar10",
    "serialize_cifar10",
    "load_idx_dataset",
    "load_cifar10_dataset",
    "synthetic_blobs",
    "split_train_val",
    "batches",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_LEN = 3073


@dataclass
class Dataset:
    """Immutable image-classification dataset: N x C x H x W floats in
    [0, 1] plus integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    tag: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.images.shape[0] == 0 or self.images.size == 0:
            raise DataFormatError("dataset is empty")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(
                f"label out of range [0, {self.num_classes}): "
                f"min {self.labels.min()}, max {self.labels.max()}"
            )
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise DataFormatError(f"image values outside [0, 1]: min {lo}, max {hi}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices, tag: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices].copy(),
            self.labels[indices].copy(),
            self.num_classes,
            self.tag if tag is None else tag,
        )


def parse_idx(images_bytes: bytes, labels_bytes: bytes) -> Dataset:
    """Parse a big-endian IDX image file plus its label file.

    Magics must be 0x00000803 (images) and 0x00000801 (labels); counts
    must agree; payload lengths must match the headers exactly.
    """
    if len(images_bytes) < 16:
        raise DataFormatError(
            f"IDX image header needs 16 bytes, got {len(images_bytes)}"
        )
    magic, n, h, w = struct.unpack(">IIII", images_bytes[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"bad IDX image magic 0x{magic:08X} (expected 0x{IDX_IMAGES_MAGIC:08X})"
        )
    if n == 0:
        raise DataFormatError("IDX image header declares zero images")
    if h == 0 or w == 0:
        raise DataFormatError(f"IDX image header declares empty {h}x{w} images")
    expected = 16 + n * h * w
    if len(images_bytes) != expected:
        raise DataFormatError(
            f"IDX image payload length {len(images_bytes)} != header-implied {expected}"
        )
    if len(labels_bytes) < 8:
        raise DataFormatError(f"IDX label header needs 8 bytes, got {len(labels_bytes)}")
    lmagic, ln = struct.unpack(">II", labels_bytes[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"bad IDX label magic 0x{lmagic:08X} (expected 0x{IDX_LABELS_MAGIC:08X})"
        )
    if ln != n:
        raise DataFormatError(f"IDX label count {ln} != image count {n}")
    if len(labels_bytes) != 8 + ln:
        raise DataFormatError(
            f"IDX label payload length {len(labels_bytes)} != header-implied {8 + ln}"
        )
    pixels = np.frombuffer(images_bytes, dtype=np.uint8, offset=16)
    labels = np.frombuffer(labels_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"IDX label {labels.max()} out of range [0, 9]")
    images = pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes=10)


def parse_cifar10(batch_bytes: bytes) -> Dataset:
    """Parse CIFAR-10 binary records: 1 label byte + 3072 pixel bytes
    (R, G, B planes of 32 x 32) per record."""
    if len(batch_bytes) == 0 or len(batch_bytes) % CIFAR_RECORD_LEN:
        raise DataFormatError(
            f"CIFAR-10 batch length {len(batch_bytes)} not a positive multiple "
            f"of {CIFAR_RECORD_LEN}"
        )
    raw = np.frombuffer(batch_bytes, dtype=np.uint8).reshape(-1, CIFAR_RECORD_LEN)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"CIFAR-10 label {labels.max()} out of range [0, 9]")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes=10)


def serialize_cifar10(dataset: Dataset) -> bytes:
    """Inverse of parse_cifar10; parse -> serialize round-trips bytes."""
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ShapeError(f"CIFAR-10 images must be N x 3 x 32 x 32, got {dataset.images.shape}")
    n = len(dataset)
    out = np.empty((n, CIFAR_RECORD_LEN), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = np.rint(dataset.images.reshape(n, 3072) * 255.0).astype(np.uint8)
    return out.tobytes()


def load_idx_dataset(images_path, labels_path, tag: str = "") -> Dataset:
    with open(images_path, "rb") as fh:
        images_bytes = fh.read()
    with open(labels_path, "rb") as fh:
        labels_bytes = fh.read()
    ds = parse_idx(images_bytes, labels_bytes)
    ds.tag = tag
    return ds


def load_cifar10_dataset(batch_paths, tag: str = "") -> Dataset:
    chunks = []
    for path in batch_paths:
        with open(path, "rb") as fh:
            chunks.append(fh.read())
    ds = parse_cifar10(b"".join(chunks))
    ds.tag = tag
    return ds


def synthetic_blobs(num_classes: int, dim: int, per_class: int, spread: float,
                    seed: int) -> Dataset:
    """Gaussian clusters at seeded uniform-random centers in the unit
    hypercube, std ``spread``, clipped to [0, 1].

    Samples are interleaved round-robin over classes (index i has class
    i mod num_classes) so any order-based split stays class-balanced.
    Images come out N x 1 x dim x 1 ready for MLP use.
    """
    if num_classes < 2:
        raise DataFormatError(f"synthetic_blobs needs >= 2 classes, got {num_classes}")
    if per_class < 1 or dim < 1:
        raise DataFormatError(f"per_class and dim must be >= 1, got {per_class}, {dim}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(num_classes, dim))
    noise = rng.normal(0.0, 1.0, size=(num_classes, per_class, dim))
    samples = centers[:, None, :] + float(spread) * noise
    # (class, sample, dim) -> (sample, class, dim): round-robin interleave
    samples = np.clip(samples.transpose(1, 0, 2), 0.0, 1.0)
    n = num_classes * per_class
    images = samples.reshape(n, 1, dim, 1)
    labels = np.tile(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(images, labels, num_classes=num_classes, tag="synthetic")


def split_train_val(dataset: Dataset, val_fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Deterministic split: last ``val_fraction`` of samples (by original
    order) become validation."""
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n_val >= n:
        raise DataFormatError(
            f"validation split of {val_fraction} leaves {n_val} of {n} samples"
        )
    idx = np.arange(n)
    return (
        dataset.subset(idx[: n - n_val], tag="train"),
        dataset.subset(idx[n - n_val:], tag="val"),
    )


def batches(dataset: Dataset, batch_size: int, seed: int,
            epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffled mini-batches covering every sample exactly once.

    The permutation is keyed by (seed, epoch) so epoch e of a run is
    reproducible in isolation; the final short batch is included.
    """
    if batch_size < 1:
        raise DataFormatError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
