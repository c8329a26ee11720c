"""Trigger patterns, backdoor-input composition, poisoning and the ASR metric.

A triggered input is x' = (1 - m) * x + m * delta with a strictly binary
mask m; the mask broadcasts over channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .layers import DTYPE
from .model import forward

TRIGGER_KINDS = ("square", "checkerboard", "random")


@dataclass
class TriggerSpec:
    pattern: np.ndarray  # [H, W, C] in [0, 1]
    mask: np.ndarray  # [H, W, 1], values in {0, 1}
    target_label: int

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=DTYPE)
        self.mask = np.asarray(self.mask, dtype=DTYPE)
        if self.pattern.ndim != 3 or self.mask.shape != self.pattern.shape[:2] + (1,):
            raise ValueError(
                f"pattern {self.pattern.shape} and mask {self.mask.shape} shapes inconsistent"
            )
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask must be strictly binary")
        if self.pattern.min() < 0.0 or self.pattern.max() > 1.0:
            raise ValueError("pattern values must lie in [0, 1]")

    @property
    def bbox(self):
        """(row0, col0, height, width) of the mask support."""
        rows = np.any(self.mask[:, :, 0] > 0, axis=1)
        cols = np.any(self.mask[:, :, 0] > 0, axis=0)
        if not rows.any():
            return (0, 0, 0, 0)
        r = np.where(rows)[0]
        c = np.where(cols)[0]
        return (int(r[0]), int(c[0]), int(r[-1] - r[0] + 1), int(c[-1] - c[0] + 1))

    def with_pattern(self, pattern):
        return TriggerSpec(pattern=pattern, mask=self.mask.copy(), target_label=self.target_label)


def make_trigger(kind, size, position, image_shape, seed=0, target_label=0):
    """Build a size x size trigger at position=(row, col) inside image_shape.

    square: all-ones patch. checkerboard: alternating 1/0 starting with 1 at
    the patch's top-left. random: seed-fixed Bernoulli(0.5) per pixel.
    """
    if kind not in TRIGGER_KINDS:
        raise ValueError(f"unknown trigger kind {kind!r}")
    h, w, c = image_shape
    row, col = position
    if row < 0 or col < 0 or row + size > h or col + size > w:
        raise ValueError(f"{size}x{size} trigger at {position} exceeds image {image_shape}")
    patch = np.zeros((size, size), dtype=DTYPE)
    if kind == "square":
        patch[:] = 1.0
    elif kind == "checkerboard":
        rr, cc = np.mgrid[0:size, 0:size]
        patch[:] = ((rr + cc) % 2 == 0).astype(DTYPE)
    else:
        patch[:] = (np.random.default_rng(seed).random((size, size)) < 0.5).astype(DTYPE)
    pattern = np.zeros((h, w, c), dtype=DTYPE)
    mask = np.zeros((h, w, 1), dtype=DTYPE)
    pattern[row : row + size, col : col + size, :] = patch[:, :, None]
    mask[row : row + size, col : col + size, 0] = 1.0
    return TriggerSpec(pattern=pattern, mask=mask, target_label=target_label)


def lower_right_position(image_shape, size):
    h, w, _ = image_shape
    return (h - size, w - size)


def apply_trigger(x, spec):
    """x' = (1 - m) x + m delta for a single image or an [N,H,W,C] batch."""
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 3
    batch = x[None] if single else x
    if batch.shape[1:] != spec.pattern.shape:
        raise ValueError(f"input shape {batch.shape[1:]} != trigger shape {spec.pattern.shape}")
    out = (1.0 - spec.mask) * batch + spec.mask * spec.pattern
    return out[0] if single else out


@dataclass
class PoisonConfig:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise ValueError("poison rate must be in (0, 1)")


def poison_count(rate, n):
    # floor(rate*n) with a guard against binary round-off on exact products
    return int(math.floor(rate * n + 1e-9))


def poison_dataset(train, spec, cfg):
    """Poison floor(rate*N) uniformly drawn samples: add trigger, relabel y_t.

    Sampling is seeded and without replacement; sample order is preserved.
    """
    n = len(train)
    k = poison_count(cfg.rate, n)
    if k < 1:
        raise ValueError(f"rate {cfg.rate} poisons no samples out of {n}")
    idx = np.random.default_rng(cfg.seed).choice(n, size=k, replace=False)
    images = train.images.copy()
    labels = train.labels.copy()
    images[idx] = apply_trigger(images[idx], spec)
    labels[idx] = spec.target_label
    return Dataset(images=images, labels=labels, num_classes=train.num_classes)


def attack_success_rate(model, test, spec, batch_size=512, exclude_target_class=False):
    """Fraction of triggered test samples classified as the target label.

    By default every sample counts, including those whose true label already
    equals the target; set exclude_target_class to drop them from the
    denominator.
    """
    images, labels = test.images, test.labels
    if exclude_target_class:
        keep = labels != spec.target_label
        images = images[keep]
        labels = labels[keep]
    if len(images) == 0:
        raise ValueError("no samples to evaluate")
    hits = 0
    for i in range(0, len(images), batch_size):
        batch = apply_trigger(images[i : i + batch_size], spec)
        preds = predict(model, batch)
        hits += int(np.sum(preds == spec.target_label))
    return hits / len(images)


def predict(model, images):
    """Argmax class per image; images are reshaped to the model's input shape."""
    flat = images.reshape(len(images), -1)
    want = int(np.prod(model.input_shape))
    if flat.shape[1] != want:
        raise ValueError(f"images with {flat.shape[1]} values cannot feed input {model.input_shape}")
    batch = flat.reshape(len(images), *model.input_shape)
    return np.argmax(forward(model, batch).logits, axis=1)
