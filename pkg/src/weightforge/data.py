"""Dataset container, MNIST IDX ingestion and the synthetic blob stand-in.

IDX files are big-endian with magic 0x00000803 (images) / 0x00000801 (labels).
Paths ending in .gz are decompressed transparently.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .layers import DTYPE

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """IDX parse failure with the byte offset where it was detected."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, C], values in [0, 1]
    labels: np.ndarray  # [N], ints in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError(f"images must be a nonempty [N,H,W,C] array, got {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise ValueError("labels must be one integer per image")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, indices):
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)

    def sample(self, n, seed):
        idx = np.random.default_rng(seed).choice(len(self), size=min(n, len(self)), replace=False)
        return self.subset(np.sort(idx))


def _read_exact(f, n, offset, what):
    data = f.read(n)
    if len(data) != n:
        raise IdxFormatError(f"truncated file while reading {what}", offset + len(data))
    return data


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _load_idx_images(path):
    with _open_maybe_gz(path) as f:
        header = _read_exact(f, 16, 0, "image header")
        magic, n, h, w = struct.unpack(">4i", header)
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}", 0)
        if n <= 0 or h <= 0 or w <= 0:
            raise IdxFormatError(f"nonsensical image dimensions {(n, h, w)}", 4)
        raw = _read_exact(f, n * h * w, 16, f"{n} images of {h}x{w}")
        if f.read(1):
            raise IdxFormatError("trailing bytes after image data", 16 + n * h * w)
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 1)
    return pixels.astype(DTYPE) / 255.0


def _load_idx_labels(path):
    with _open_maybe_gz(path) as f:
        header = _read_exact(f, 8, 0, "label header")
        magic, n = struct.unpack(">2i", header)
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}", 0)
        if n <= 0:
            raise IdxFormatError(f"nonsensical label count {n}", 4)
        raw = _read_exact(f, n, 8, f"{n} labels")
        if f.read(1):
            raise IdxFormatError("trailing bytes after label data", 8 + n)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_mnist_idx(images_path, labels_path, num_classes=10):
    """Load an IDX image/label pair into a Dataset (pixels scaled by /255)."""
    images = _load_idx_images(images_path)
    labels = _load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"image count {len(images)} != label count {len(labels)}", 4
        )
    return Dataset(images=images, labels=labels, num_classes=num_classes)


def synth_dataset(num_classes, n, seed, size=28, separation=4.0):
    """Deterministic class-conditional Gaussian-blob images, 28x28x1 by default.

    Class c gets a blob centered on a ring position; per-sample center jitter
    has std = ring_spacing / separation, so centroids sit `separation` sigmas
    apart. Labels are balanced (class c gets n//num_classes + (c < n % num_classes)).
    """
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    counts = [n // num_classes + (1 if c < n % num_classes else 0) for c in range(num_classes)]
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    ring_r = size * 0.28
    centers = np.stack(
        [size / 2 + ring_r * np.sin(angles), size / 2 + ring_r * np.cos(angles)], axis=1
    )
    spacing = 2.0 * ring_r * np.sin(np.pi / num_classes)
    jitter = spacing / separation
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.zeros((n, size, size, 1), dtype=DTYPE)
    labels = np.zeros(n, dtype=np.int64)
    i = 0
    for c in range(num_classes):
        for _ in range(counts[c]):
            cy, cx = centers[c] + rng.normal(0.0, jitter, size=2)
            amp = rng.uniform(0.7, 1.0)
            radius = rng.uniform(2.2, 3.2)
            blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))
            noise = rng.normal(0.0, 0.02, size=(size, size))
            images[i, :, :, 0] = np.clip(blob + noise, 0.0, 1.0)
            labels[i] = c
            i += 1
    return Dataset(images=images, labels=labels, num_classes=num_classes)
