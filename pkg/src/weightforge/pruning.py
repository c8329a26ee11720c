"""Magnitude-based channel pruning, shared by the attack's resilience loop
and the fine-pruning defense: channels with the smallest mean clean-activation
magnitude go first."""

from __future__ import annotations

import numpy as np

from .analysis import unit_activations
from .zoo import evaluate


def channel_activation_magnitudes(model, layer_index, images):
    """Mean spatial-average activation magnitude per conv channel."""
    acts = unit_activations(model, layer_index, images, pooling="mean")
    return np.abs(acts).mean(axis=0)


def magnitude_prune_order(model, layer_index, images):
    """Channel indices sorted ascending by clean-activation magnitude."""
    mags = channel_activation_magnitudes(model, layer_index, images)
    return [int(i) for i in np.argsort(mags, kind="stable")]


def zero_channel(model, layer_index, channel):
    layer = model.layers[layer_index]
    layer.weights[channel] = 0.0
    layer.bias[channel] = 0.0


def prune_until_budget(model, layer_index, eval_ds, acc_budget, order=None, order_images=None):
    """Zero channels in magnitude order until accuracy drops by >= acc_budget.

    Mutates the model. Returns (pruned_channels, accuracy_trajectory); the
    trajectory starts with the unpruned accuracy.
    """
    if order is None:
        images = order_images if order_images is not None else eval_ds.images
        order = magnitude_prune_order(model, layer_index, images)
    base = evaluate(model, eval_ds)
    trajectory = [base]
    pruned = []
    for ch in order:
        zero_channel(model, layer_index, ch)
        pruned.append(ch)
        acc = evaluate(model, eval_ds)
        trajectory.append(acc)
        if base - acc >= acc_budget:
            break
    return pruned, trajectory


def simulate_pruning(model, layer_index, eval_ds, acc_budget, order_images=None):
    """Channels that magnitude pruning at the budget would remove (model untouched)."""
    clone = model.copy()
    pruned, _ = prune_until_budget(clone, layer_index, eval_ds, acc_budget,
                                   order_images=order_images)
    return set(pruned)
