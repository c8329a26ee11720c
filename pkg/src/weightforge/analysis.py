"""Candidate discovery and separation scoring.

Ablation zeroes a unit's post-activation output for a whole batch and
re-runs the remaining layers; the model's parameters are never touched.
Separation of a neuron is 1 minus the overlap coefficient of Gaussian fits
to its clean and triggered activation samples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .layers import Conv2D, Dense
from .model import forward, forward_from
from .zoo import model_inputs

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True, order=True)
class NeuronId:
    layer_index: int
    unit_index: int  # dense unit, or conv output-channel index


@dataclass
class ActivationStats:
    neuron: NeuronId
    clean_mean: float
    clean_std: float
    backdoor_mean: float
    backdoor_std: float


@dataclass
class SeparationScore:
    neuron: NeuronId
    overlap: float

    @property
    def separation(self):
        return 1.0 - self.overlap


def _accuracy_from_logits(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _ablation_candidates(model, X, acc_threshold, layer_indices, unit_count, zero_unit):
    inputs = model_inputs(model, X.images)
    trace = forward(model, inputs)
    base_acc = _accuracy_from_logits(trace.logits, X.labels)
    kept = []
    for li in layer_indices:
        act = trace.per_layer_activations[li]
        for unit in range(unit_count(model.layers[li])):
            ablated = act.copy()
            zero_unit(ablated, unit)
            logits = forward_from(model, li, ablated)
            drop = base_acc - _accuracy_from_logits(logits, X.labels)
            if drop <= acc_threshold + 1e-12:
                kept.append(NeuronId(layer_index=li, unit_index=unit))
    return kept


def ablate_neurons(model, X, acc_threshold=0.0, layer_indices=None):
    """Hidden dense units whose individual silencing costs <= acc_threshold accuracy."""
    if layer_indices is None:
        layer_indices = model.hidden_dense_layers()
    return _ablation_candidates(
        model, X, acc_threshold, layer_indices,
        unit_count=lambda l: l.weights.shape[0],
        zero_unit=lambda act, u: act.__setitem__((slice(None), u), 0.0),
    )


def ablate_filters(model, X, acc_threshold=0.05, layer_indices=None):
    """Conv output channels whose individual silencing costs <= acc_threshold."""
    if layer_indices is None:
        layer_indices = model.conv_layers()
    if not layer_indices:
        warnings.warn("model has no convolutional layers; nothing to ablate")
        return []
    return _ablation_candidates(
        model, X, acc_threshold, layer_indices,
        unit_count=lambda l: l.filters,
        zero_unit=lambda act, u: act.__setitem__((Ellipsis, u), 0.0),
    )


def unit_activations(model, layer_index, images, pooling="mean"):
    """Per-sample activation value of every unit in a layer.

    Dense layers return the activations as-is; conv layers pool each channel
    over its spatial positions ("mean" or "max").
    """
    inputs = model_inputs(model, images)
    act = forward(model, inputs).per_layer_activations[layer_index]
    layer = model.layers[layer_index]
    if isinstance(layer, Dense):
        return act
    if isinstance(layer, Conv2D):
        if pooling == "mean":
            return act.mean(axis=(1, 2))
        if pooling == "max":
            return act.max(axis=(1, 2))
        raise ValueError(f"unknown pooling {pooling!r}")
    raise ValueError(f"layer {layer_index} ({layer.kind}) has no unit activations")


def activation_stats(model, layer_index, neurons, X_clean, X_backdoor, pooling="mean"):
    """Mean/std (population) of clean vs triggered activations per neuron."""
    clean = unit_activations(model, layer_index, X_clean, pooling)
    backdoor = unit_activations(model, layer_index, X_backdoor, pooling)
    out = []
    for nid in neurons:
        if nid.layer_index != layer_index:
            raise ValueError(f"neuron {nid} not in layer {layer_index}")
        c = clean[:, nid.unit_index]
        b = backdoor[:, nid.unit_index]
        out.append(ActivationStats(
            neuron=nid,
            clean_mean=float(c.mean()), clean_std=float(c.std()),
            backdoor_mean=float(b.mean()), backdoor_std=float(b.std()),
        ))
    return out


def normal_overlap(mu1, sigma1, mu2, sigma2):
    """Overlap coefficient of two normal densities: integral of min(pdf1, pdf2).

    Standard deviations are floored at 1e-6 so degenerate (dead-neuron)
    distributions behave as narrow spikes rather than point masses.
    """
    if sigma1 < 0 or sigma2 < 0:
        raise ValueError("standard deviations must be non-negative")
    s1 = max(sigma1, SIGMA_FLOOR)
    s2 = max(sigma2, SIGMA_FLOOR)
    if np.isclose(mu1, mu2) and np.isclose(s1, s2):
        return 1.0
    if np.isclose(s1, s2):
        # equal widths: single crossing at the midpoint
        return float(2.0 * norm.cdf(-abs(mu1 - mu2) / (2.0 * s1)))
    # pdf1 == pdf2 reduces to a quadratic in x
    a = 1.0 / (2 * s1**2) - 1.0 / (2 * s2**2)
    b = mu2 / s2**2 - mu1 / s1**2
    c = mu1**2 / (2 * s1**2) - mu2**2 / (2 * s2**2) - np.log(s2 / s1)
    disc = b * b - 4 * a * c
    if disc <= 0:
        # one pdf dominates everywhere except a tangency point
        lo = (mu1, s1) if s1 < s2 else (mu2, s2)
        return float(norm.cdf(np.inf, *lo))
    r1, r2 = sorted(((-b - np.sqrt(disc)) / (2 * a), (-b + np.sqrt(disc)) / (2 * a)))
    edges = [-np.inf, r1, r2, np.inf]
    total = 0.0
    for left, right in zip(edges[:-1], edges[1:]):
        mid = _finite_midpoint(left, right, mu1, mu2, s1, s2)
        if norm.pdf(mid, mu1, s1) <= norm.pdf(mid, mu2, s2):
            total += norm.cdf(right, mu1, s1) - norm.cdf(left, mu1, s1)
        else:
            total += norm.cdf(right, mu2, s2) - norm.cdf(left, mu2, s2)
    return float(min(max(total, 0.0), 1.0))


def _finite_midpoint(left, right, mu1, mu2, s1, s2):
    span = 10.0 * max(s1, s2) + abs(mu1) + abs(mu2) + 1.0
    if np.isinf(left):
        left = right - span
    if np.isinf(right):
        right = left + span
    return 0.5 * (left + right)


def separation_scores(stats):
    return [
        SeparationScore(
            neuron=s.neuron,
            overlap=normal_overlap(s.clean_mean, s.clean_std, s.backdoor_mean, s.backdoor_std),
        )
        for s in stats
    ]


def select_target_neurons(scores, fraction):
    """Top ceil(fraction * count) neurons by separation; ties to lower indices."""
    if not scores:
        raise ValueError("no separation scores to select from")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    k = int(np.ceil(fraction * len(scores)))
    ordered = sorted(scores, key=lambda s: (-s.separation, s.neuron.layer_index, s.neuron.unit_index))
    return [s.neuron for s in ordered[:k]]
