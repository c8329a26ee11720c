"""Backdoor injection by direct weight manipulation.

Dense layers: pick ablation-safe neurons, align and grow their incoming
weights from trigger-bearing sources until clean and triggered activation
distributions separate, silence them on clean data with a guard bias, then
wire them into the target logit. Convolutional layers: replace expendable
channels with matched filters built from the trigger (or from the feature-map
difference the previous injection produces) and keep only placements that
survive magnitude pruning. No training, and no architecture changes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    NeuronId,
    ablate_filters,
    ablate_neurons,
    normal_overlap,
    unit_activations,
)
from .layers import Conv2D, Dense
from .mitm import mitm_optimize_trigger
from .model import forward
from .pruning import magnitude_prune_order, simulate_pruning
from .triggers import apply_trigger, attack_success_rate
from .zoo import evaluate, model_inputs


class InjectionError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class AttackConfig:
    # dense-layer handcrafting
    target_fraction: float = 0.1  # share of each hidden layer to compromise
    n_per_layer: dict = None  # optional explicit counts, {layer_index: n}
    sep_threshold: float = 0.99
    acc_threshold: float = 0.0
    guard_k: float = 3.0
    c_growth: float = 1.5
    c_max_steps: int = 40
    shrink_steps: int = 40
    logit_margin: float = 2.0  # c_n: multiple of the clean logit gap to exceed
    logit_percentile: float = 99.0
    # conv-layer handcrafting
    filters_per_layer: int = 2  # nf_i
    filter_scale: float = 1.0  # c_i, capped at 1.0
    filter_acc_threshold: float = 0.05
    conv_pooling: str = "max"  # channel statistic for separation readouts
    prune_budget: float = 0.03
    prune_retries: int = 25
    # trigger pre-optimization
    mitm_enabled: bool = False
    mitm_layer: int = 0
    mitm_iters: int = 50
    mitm_step: float = 2.0 / 255.0
    # evasion switches
    weight_cap: bool = True  # keep |w| under each layer's pre-attack max

    def __post_init__(self):
        if not 0.0 < self.sep_threshold <= 1.0:
            raise ValueError("sep_threshold must be in (0, 1]")
        if not 0.0 < self.target_fraction <= 1.0:
            raise ValueError("target_fraction must be in (0, 1]")
        if self.filter_scale > 1.0:
            raise ValueError("filter_scale must not exceed 1.0")

    def targets_for_layer(self, layer_index, width):
        if self.n_per_layer and layer_index in self.n_per_layer:
            return min(self.n_per_layer[layer_index], width)
        return int(np.ceil(self.target_fraction * width))


@dataclass
class InjectionReport:
    targets: dict = field(default_factory=dict)  # layer -> [unit, ...]
    multipliers: dict = field(default_factory=dict)  # "layer:unit" -> c
    separations: dict = field(default_factory=dict)  # "layer:unit" -> achieved
    guard_biases: dict = field(default_factory=dict)  # "layer:unit" -> bias
    filters: list = field(default_factory=list)  # conv injections
    prune_retries: int = 0
    accuracy_before: float = None
    accuracy_after: float = None
    asr_before: float = None
    asr_after: float = None
    mitm: dict = None
    logit_weights: dict = field(default_factory=dict)
    seconds: float = None

    def to_dict(self):
        return {
            "targets": {str(k): v for k, v in self.targets.items()},
            "multipliers": self.multipliers,
            "separations": self.separations,
            "guard_biases": self.guard_biases,
            "filters": self.filters,
            "prune_retries": self.prune_retries,
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "asr_before": self.asr_before,
            "asr_after": self.asr_after,
            "mitm": self.mitm,
            "logit_weights": self.logit_weights,
            "seconds": self.seconds,
        }


def _key(layer_index, unit):
    return f"{layer_index}:{unit}"


def _layer_inputs(model, layer_index, images):
    """Activations feeding model.layers[layer_index] (the raw input for layer 0)."""
    inputs = model_inputs(model, images)
    if layer_index == 0:
        return inputs
    return forward(model, inputs).per_layer_activations[layer_index - 1]


def _unit_separation(model, layer_index, unit, X_clean, X_backdoor, pooling):
    clean = unit_activations(model, layer_index, X_clean, pooling)[:, unit]
    bd = unit_activations(model, layer_index, X_backdoor, pooling)[:, unit]
    return 1.0 - normal_overlap(clean.mean(), clean.std(), bd.mean(), bd.std())


def increase_separation_fc(model, layer_index, targets, X_clean, X_backdoor, cfg, report=None):
    """Grow each target's trigger-aligned incoming weights until its clean and
    triggered activations separate past cfg.sep_threshold.

    Source inputs are those whose mean activation differs between X_clean and
    X_backdoor. Signs are aligned so the difference raises the triggered side;
    grown weights never exceed the layer's pre-attack max |w| when the cap is
    enabled. If growth alone is not enough, the target's remaining incoming
    weights are shrunk to squeeze the clean-side variance.
    """
    layer = model.layers[layer_index]
    if not isinstance(layer, Dense):
        raise InjectionError("separation", f"layer {layer_index} is not dense")
    prev_clean = _layer_inputs(model, layer_index, X_clean)
    prev_bd = _layer_inputs(model, layer_index, X_backdoor)
    diff = (prev_bd - prev_clean).mean(axis=0)
    max_diff = np.abs(diff).max()
    if max_diff <= 0:
        raise InjectionError("separation", "clean and triggered inputs are identical here")
    sources = np.abs(diff) >= 0.1 * max_diff
    cap = np.abs(layer.weights).max()
    report = report if report is not None else InjectionReport()
    for nid in targets:
        unit = nid.unit_index
        sep = _unit_separation(model, layer_index, unit, X_clean, X_backdoor, "mean")
        if sep >= cfg.sep_threshold:
            report.multipliers[_key(layer_index, unit)] = 1.0
            report.separations[_key(layer_index, unit)] = sep
            continue
        # align signs so every source pushes the triggered side up
        row = layer.weights[unit]
        base = np.where(np.sign(row[sources]) == np.sign(diff[sources]),
                        row[sources], -row[sources])
        base = np.where(base == 0.0, 0.05 * cap * np.sign(diff[sources]), base)
        # grow as far as the cap allows: the larger the multiplier, the more
        # noise it takes to disturb the handcrafted path
        c = 1.0
        for _ in range(cfg.c_max_steps):
            grown = base * c
            if cfg.weight_cap:
                grown = np.clip(grown, -cap, cap)
                layer.weights[unit, sources] = grown
                if np.all(np.abs(grown) >= cap - 1e-12):
                    break
            else:
                layer.weights[unit, sources] = grown
                if _unit_separation(model, layer_index, unit, X_clean, X_backdoor,
                                    "mean") >= cfg.sep_threshold:
                    break
            c *= cfg.c_growth
        sep = _unit_separation(model, layer_index, unit, X_clean, X_backdoor, "mean")
        if sep < cfg.sep_threshold:
            # squeeze the clean-side variance contributed by non-source inputs
            for _ in range(cfg.shrink_steps):
                layer.weights[unit, ~sources] /= cfg.c_growth
                sep = _unit_separation(model, layer_index, unit, X_clean, X_backdoor, "mean")
                if sep >= cfg.sep_threshold:
                    break
        if sep < cfg.sep_threshold:
            raise InjectionError(
                "separation",
                f"neuron {layer_index}:{unit} stuck at separation {sep:.4f} "
                f"(threshold {cfg.sep_threshold})",
            )
        report.multipliers[_key(layer_index, unit)] = c
        report.separations[_key(layer_index, unit)] = sep
    return model


def prebias_clean_stats(model, layer_index, targets, X_clean):
    """Mean/std of each target's pre-bias pre-activation on clean inputs."""
    layer = model.layers[layer_index]
    prev = _layer_inputs(model, layer_index, X_clean)
    stats = {}
    for nid in targets:
        z = prev @ layer.weights[nid.unit_index]
        stats[nid.unit_index] = (float(z.mean()), float(z.std()))
    return stats


def set_guard_bias(model, layer_index, targets, clean_stats, k, report=None):
    """bias <- -mu - k*sigma of the clean pre-bias activation, per target."""
    layer = model.layers[layer_index]
    for nid in targets:
        mu, sigma = clean_stats[nid.unit_index]
        b = -mu - k * sigma
        layer.bias[nid.unit_index] = b
        if report is not None:
            report.guard_biases[_key(layer_index, nid.unit_index)] = b
    return model


def amplify_logit(model, targets_last_hidden, target_label, c_n, X_clean, X_backdoor,
                  weight_cap=True, percentile=99.0, report=None):
    """Wire the guarded targets into the target-class logit.

    The boost is sized against the triggered logit gap (largest rival logit
    minus the target logit): it must beat the gap's `percentile` value, and
    aims for c_n times that. With the cap enabled no weight may exceed the
    final layer's pre-attack max |w|; the aim is then cap-limited, but
    falling short of the hard 1x requirement is an error.
    """
    final_index = model.dense_layers()[-1]
    final = model.layers[final_index]
    cap = float(np.abs(final.weights).max())
    units = [nid.unit_index for nid in targets_last_hidden]
    hidden_index = model.dense_layers()[-2] if len(model.dense_layers()) > 1 else None
    if hidden_index is None:
        raise InjectionError("logit", "model has no hidden dense layer")
    acts_bd = unit_activations(model, hidden_index, X_backdoor, "mean")[:, units]
    a = acts_bd.mean(axis=0)
    if np.all(a <= 0):
        return model  # nothing to exploit; logits stay untouched on clean inputs
    logits_bd = forward(model, model_inputs(model, X_backdoor)).logits
    others = np.delete(logits_bd, target_label, axis=1).max(axis=1)
    gap = others - logits_bd[:, target_label]
    required = max(float(np.percentile(gap, percentile)), 1.0)
    desired = c_n * required
    if weight_cap:
        attainable = float(a @ np.full_like(a, cap))
        if attainable < required:
            raise InjectionError(
                "logit",
                f"weight cap {cap:.4f} limits the triggered boost to {attainable:.2f} "
                f"< required {required:.2f}; compromise more neurons (larger n_i)",
            )
        weights = _waterfill(a, min(desired, attainable), cap)
    else:
        weights = desired * a / float(a @ a)
    for u, w in zip(units, weights):
        final.weights[target_label, u] = w
        if report is not None:
            report.logit_weights[_key(final_index, u)] = float(w)
    return model


def _waterfill(a, total, cap):
    """Weights w_i = min(cap, s*a_i) with s chosen so sum(a_i*w_i) == total."""
    lo, hi = 0.0, cap / max(a[a > 0].min(), 1e-12) + 1.0
    for _ in range(200):
        s = 0.5 * (lo + hi)
        if float(a @ np.minimum(cap, s * a)) < total:
            lo = s
        else:
            hi = s
    return np.minimum(cap, hi * a)


def craft_filter_from_trigger(spec, layer, c_i):
    """One-channel k x k filter carrying the trigger patch, affinely rescaled
    into c_i * [w_min, w_max] of the host layer."""
    if not isinstance(layer, Conv2D):
        raise InjectionError("filters", "host layer is not convolutional")
    k = layer.kernel
    r0, c0, h, w = spec.bbox
    patch = spec.pattern[r0 : r0 + min(h, k), c0 : c0 + min(w, k), 0]
    canvas = np.zeros((k, k), dtype=layer.weights.dtype)
    canvas[: patch.shape[0], : patch.shape[1]] = patch
    return _rescale_pattern(canvas, layer, c_i)


def _rescale_pattern(canvas, layer, c_i):
    lo = c_i * layer.weights.min()
    hi = c_i * layer.weights.max()
    span = canvas.max() - canvas.min()
    if span <= 0:
        import warnings

        warnings.warn("constant trigger patch; filter normalized to the upper bound")
        return np.full(canvas.shape, hi, dtype=layer.weights.dtype)
    return lo + (hi - lo) * (canvas - canvas.min()) / span


def _difference_pattern(model, layer_index, X_clean, X_backdoor, kernel):
    """Mean triggered-minus-clean feature map at a layer, cropped to a kernel
    window centered on the strongest difference; returns (pattern, channel)."""
    clean = forward(model, model_inputs(model, X_clean)).per_layer_activations[layer_index]
    bd = forward(model, model_inputs(model, X_backdoor)).per_layer_activations[layer_index]
    diff = (bd - clean).mean(axis=0)  # [H, W, C]
    channel = int(np.argmax(np.abs(diff).sum(axis=(0, 1))))
    plane = diff[:, :, channel]
    r, c = np.unravel_index(np.argmax(np.abs(plane)), plane.shape)
    h, w = plane.shape
    r0 = min(max(r - kernel // 2, 0), max(h - kernel, 0))
    c0 = min(max(c - kernel // 2, 0), max(w - kernel, 0))
    window = plane[r0 : r0 + kernel, c0 : c0 + kernel]
    canvas = np.zeros((kernel, kernel), dtype=plane.dtype)
    canvas[: window.shape[0], : window.shape[1]] = window
    return canvas, channel


def inject_conv_filters(model, dataset_sample, spec, cfg, report=None):
    """Replace expendable conv channels with trigger-matched filters, layer by
    layer, keeping only placements that survive magnitude pruning."""
    conv_layers = model.conv_layers()
    if not conv_layers:
        raise InjectionError("filters", "model has no convolutional layers")
    report = report if report is not None else InjectionReport()
    if cfg.filters_per_layer <= 0:
        return model, report
    X_clean = dataset_sample.images
    X_backdoor = apply_trigger(X_clean, spec)
    for depth, li in enumerate(conv_layers):
        layer = model.layers[li]
        candidates = [
            nid.unit_index
            for nid in ablate_filters(model, dataset_sample, cfg.filter_acc_threshold,
                                      layer_indices=[li])
        ]
        if not candidates:
            raise InjectionError("filters", f"no expendable channels in layer {li}")
        if depth == 0:
            pattern = craft_filter_from_trigger(spec, layer, cfg.filter_scale)
            in_slice = 0
        else:
            window, in_slice = _difference_pattern(model, conv_layers[depth - 1],
                                                   X_clean, X_backdoor, layer.kernel)
            pattern = _rescale_pattern(window, layer, cfg.filter_scale)
        # prefer channels that sit high in the pruning order (pruned last)
        prune_rank = {ch: pos for pos, ch in
                      enumerate(magnitude_prune_order(model, li, X_clean))}
        ordered = sorted(candidates, key=lambda ch: -prune_rank[ch])
        placed = []
        retries = 0
        for ch in ordered:
            if len(placed) == cfg.filters_per_layer:
                break
            if retries > cfg.prune_retries:
                raise InjectionError(
                    "filters", f"layer {li}: pruning keeps removing injected channels"
                )
            saved_w = layer.weights[ch].copy()
            saved_b = layer.bias[ch]
            layer.weights[ch, :, :, :] = 0.0
            layer.weights[ch, in_slice] = pattern
            layer.bias[ch] = 0.0
            doomed = simulate_pruning(model, li, dataset_sample, cfg.prune_budget,
                                      order_images=X_clean)
            if (set(placed) | {ch}) & doomed:
                layer.weights[ch] = saved_w
                layer.bias[ch] = saved_b
                retries += 1
                continue
            placed.append(ch)
            sep = _unit_separation(model, li, ch, X_clean, X_backdoor, cfg.conv_pooling)
            report.filters.append(
                {"layer": li, "channel": int(ch), "input_slice": int(in_slice),
                 "separation": float(sep)}
            )
            report.separations[_key(li, ch)] = float(sep)
        report.prune_retries += retries
        if len(placed) < cfg.filters_per_layer:
            raise InjectionError(
                "filters",
                f"layer {li}: only {len(placed)} of {cfg.filters_per_layer} "
                f"channels could be injected without being pruned",
            )
    return model, report


def _dense_stage(model, layer_index, sample, X_backdoor_images, cfg, report):
    """Steps 4-6 on one hidden dense layer; returns the chosen targets."""
    candidates = [
        nid for nid in ablate_neurons(model, sample, cfg.acc_threshold, layer_indices=[layer_index])
    ]
    if not candidates:
        raise InjectionError("targets", f"no ablation-safe neurons in layer {layer_index}")
    X_clean = sample.images
    seps = [
        (nid, _unit_separation(model, layer_index, nid.unit_index, X_clean, X_backdoor_images, "mean"))
        for nid in candidates
    ]
    seps.sort(key=lambda t: (-t[1], t[0].unit_index))
    width = model.layers[layer_index].weights.shape[0]
    n = cfg.targets_for_layer(layer_index, width)
    targets = [nid for nid, _ in seps[:n]]
    report.targets[layer_index] = [nid.unit_index for nid in targets]
    increase_separation_fc(model, layer_index, targets, X_clean, X_backdoor_images, cfg, report)
    stats = prebias_clean_stats(model, layer_index, targets, X_clean)
    set_guard_bias(model, layer_index, targets, stats, cfg.guard_k, report)
    return targets


def inject_backdoor(model, small_sample, spec, cfg=None, eval_dataset=None):
    """Full injection pipeline; mutates the model, returns (model, report).

    Conv models get their filters handcrafted first, then every hidden dense
    layer is compromised and the final layer rewired. Layer count, kinds and
    tensor shapes are untouched.
    """
    cfg = cfg or AttackConfig()
    if len(small_sample) < 50:
        raise InjectionError("precheck", f"need at least 50 samples, got {len(small_sample)}")
    t0 = time.time()
    report = InjectionReport()
    measure = eval_dataset if eval_dataset is not None else small_sample
    report.accuracy_before = evaluate(model, measure)
    report.asr_before = attack_success_rate(model, measure, spec)
    shapes_before = [tuple(p.shape) for l in model.layers for _, p in l.params()]

    if cfg.mitm_enabled:
        spec, mreport = mitm_optimize_trigger(
            model, small_sample, spec, cfg.mitm_layer, cfg.mitm_iters, cfg.mitm_step
        )
        report.mitm = {
            "objective_before": mreport.objective_before,
            "objective_after": mreport.objective_after,
            "iterations": mreport.iterations,
            "stagnated": mreport.stagnated,
        }

    if model.conv_layers():
        inject_conv_filters(model, small_sample, spec, cfg, report)

    X_backdoor_images = apply_trigger(small_sample.images, spec)
    targets = None
    for layer_index in model.hidden_dense_layers():
        targets = _dense_stage(model, layer_index, small_sample, X_backdoor_images, cfg, report)
    if targets is None:
        raise InjectionError("targets", "model has no hidden dense layer to compromise")
    amplify_logit(
        model, targets, spec.target_label, cfg.logit_margin,
        small_sample.images, X_backdoor_images,
        weight_cap=cfg.weight_cap, percentile=cfg.logit_percentile, report=report,
    )

    shapes_after = [tuple(p.shape) for l in model.layers for _, p in l.params()]
    if shapes_before != shapes_after:
        raise InjectionError("postcheck", "architecture changed during injection")
    report.accuracy_after = evaluate(model, measure)
    report.asr_after = attack_success_rate(model, measure, spec)
    report.seconds = time.time() - t0
    model.provenance.setdefault("attacks", []).append(
        {"kind": "handcraft", "target_label": spec.target_label}
    )
    return model, report
