"""Trigger optimization: ascend the trigger pattern to maximize the mean L1
activation gap between clean and triggered inputs at a chosen layer, before
any weights are touched. Only pixels under the mask move; the best-scoring
pattern seen is returned, so the objective never regresses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import backward_from_layer, forward
from .triggers import apply_trigger
from .zoo import model_inputs


@dataclass
class MitmReport:
    objective_before: float
    objective_after: float
    iterations: int
    stagnated: bool


def activation_gap(model, layer_index, images, spec):
    """Mean per-sample L1 difference of layer activations, clean vs triggered."""
    clean = forward(model, model_inputs(model, images)).per_layer_activations[layer_index]
    trig = forward(model, model_inputs(model, apply_trigger(images, spec))).per_layer_activations[
        layer_index
    ]
    return float(np.abs(trig - clean).reshape(len(images), -1).sum(axis=1).mean())


def mitm_optimize_trigger(model, X, spec, layer_index, iters=50, step=2.0 / 255.0):
    """Sign-gradient ascent on the trigger pattern in [0, 1].

    Returns (optimized TriggerSpec, MitmReport). Stops early after five
    consecutive iterations with zero gradient at every masked pixel.
    """
    if iters < 1:
        raise ValueError("need at least one iteration")
    images = X.images
    mask = spec.mask  # [H, W, 1], broadcasts over channels
    delta = spec.pattern.copy()
    clean_acts = forward(model, model_inputs(model, images)).per_layer_activations[layer_index]
    best = delta.copy()
    best_obj = activation_gap(model, layer_index, images, spec.with_pattern(delta))
    start_obj = best_obj
    zero_streak = 0
    stagnated = False
    done = 0
    for it in range(iters):
        current = spec.with_pattern(delta)
        triggered = apply_trigger(images, current)
        trig_in = model_inputs(model, triggered)
        trig_acts = forward(model, trig_in).per_layer_activations[layer_index]
        d_act = np.sign(trig_acts - clean_acts) / len(images)
        d_input = backward_from_layer(model, trig_in, layer_index, d_act)
        d_images = d_input.reshape(triggered.shape)
        g = (mask * d_images).sum(axis=0)
        done = it + 1
        if np.all(g == 0.0):
            zero_streak += 1
            if zero_streak >= 5:
                stagnated = True
                break
            continue
        zero_streak = 0
        delta = np.clip(delta + step * np.sign(g), 0.0, 1.0)
        delta = mask * delta + (1.0 - mask) * spec.pattern
        obj = activation_gap(model, layer_index, images, spec.with_pattern(delta))
        if obj > best_obj:
            best_obj = obj
            best = delta.copy()
    report = MitmReport(
        objective_before=start_obj,
        objective_after=best_obj,
        iterations=done,
        stagnated=stagnated,
    )
    return spec.with_pattern(best), report
