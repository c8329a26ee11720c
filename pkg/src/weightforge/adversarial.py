"""Projected gradient descent in L2 and Linf, on pixel inputs in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import DTYPE
from .model import backward
from .zoo import model_inputs


@dataclass
class AdvConfig:
    norm: str = "linf"  # "l2" or "linf"
    steps: int = 10
    step_size: float = None
    epsilon: float = None
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ValueError("norm must be 'l2' or 'linf'")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epsilon is None:
            self.epsilon = 3.0 if self.norm == "l2" else 8.0 / 255.0
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.step_size is None:
            self.step_size = 2.5 * self.epsilon / self.steps if self.norm == "l2" else self.epsilon / 4.0


def _project(delta, cfg):
    flat = delta.reshape(len(delta), -1)
    if cfg.norm == "linf":
        np.clip(flat, -cfg.epsilon, cfg.epsilon, out=flat)
    else:
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        factor = np.minimum(1.0, cfg.epsilon / np.maximum(norms, 1e-12))
        flat *= factor
    return flat.reshape(delta.shape)


def pgd(model, images, labels, cfg, targeted=False, random_start=True):
    """PGD adversarial examples; images stay in [0, 1].

    Untargeted ascends the loss of the true labels; targeted descends the
    loss toward the provided target labels.
    """
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    if random_start:
        if cfg.norm == "linf":
            delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=images.shape)
        else:
            delta = rng.normal(0.0, cfg.epsilon / np.sqrt(images[0].size), size=images.shape)
        delta = _project(delta, cfg)
    else:
        delta = np.zeros_like(images)
    x = np.clip(images + delta, 0.0, 1.0)
    sign = -1.0 if targeted else 1.0
    for _ in range(cfg.steps):
        grads = backward(model, model_inputs(model, x), labels)
        g = grads.input.reshape(x.shape)
        if cfg.norm == "linf":
            step = cfg.step_size * np.sign(g)
        else:
            flat = g.reshape(len(g), -1)
            norms = np.linalg.norm(flat, axis=1, keepdims=True)
            step = cfg.step_size * (flat / np.maximum(norms, 1e-12)).reshape(g.shape)
        x = x + sign * step
        x = np.clip(images + _project(x - images, cfg), 0.0, 1.0)
    return x
