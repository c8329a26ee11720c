"""Detection and removal defenses, each emitting a DefenseReport.

Sweep defenses (noise, clipping) snapshot the parameters and restore them
bit-exactly after every measurement. Mutating defenses (fine-tuning,
fine-pruning) change the model they are given.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from .adversarial import AdvConfig, pgd
from .data import Dataset
from .hessian import top_eigenvalue
from .layers import Conv2D, Dense
from .pruning import magnitude_prune_order, prune_until_budget
from .triggers import TriggerSpec, apply_trigger, attack_success_rate, predict
from .zoo import TrainConfig, evaluate, train

SCHEMA_VERSION = 1


@dataclass
class DefenseReport:
    defense_name: str
    sweep_values: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    asr: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.sweep_values, self.sweep_values[1:])):
            raise ValueError("sweep values must be strictly increasing")

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "defense_name": self.defense_name,
            "sweep_values": list(self.sweep_values),
            "accuracy": list(self.accuracy),
            "asr": list(self.asr),
            "verdicts": self.verdicts,
            "seeds": list(self.seeds),
            "runtime_s": self.runtime_s,
            "extra": self.extra,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def finetune_defense(model, clean_data, trigger, eval_data, epochs=5, cfg=None):
    """Resume SGD on trigger-free data; reports accuracy/ASR per epoch."""
    cfg = cfg or TrainConfig(epochs=1, batch_size=128, lr=0.01, momentum=0.9, seed=0)
    t0 = time.time()
    accs = [evaluate(model, eval_data)]
    asrs = [attack_success_rate(model, eval_data, trigger)]
    for epoch in range(epochs):
        ecfg = TrainConfig(epochs=1, batch_size=cfg.batch_size, lr=cfg.lr,
                           momentum=cfg.momentum, seed=cfg.seed + epoch)
        train(model, clean_data, ecfg)
        accs.append(evaluate(model, eval_data))
        asrs.append(attack_success_rate(model, eval_data, trigger))
    report = DefenseReport(
        defense_name="finetune",
        sweep_values=list(range(epochs + 1)),
        accuracy=accs,
        asr=asrs,
        verdicts={"asr_before": asrs[0], "asr_after": asrs[-1],
                  "accuracy_before": accs[0], "accuracy_after": accs[-1]},
        seeds=[cfg.seed],
        runtime_s=time.time() - t0,
    )
    return model, report


def fineprune_defense(model, clean_data, trigger, eval_data, acc_budget=0.05,
                      finetune_epochs=2, cfg=None):
    """Zero the quietest conv channels of the last conv layer until accuracy
    drops by acc_budget, then fine-tune; reports the ASR trajectory."""
    t0 = time.time()
    conv = model.conv_layers()
    if not conv:
        report = DefenseReport(defense_name="fineprune",
                               verdicts={"applicable": False},
                               runtime_s=time.time() - t0)
        return model, report
    layer_index = conv[-1]
    order = magnitude_prune_order(model, layer_index, clean_data.images)
    base_acc = evaluate(model, eval_data)
    asrs = [attack_success_rate(model, eval_data, trigger)]
    accs = [base_acc]
    pruned = []
    if acc_budget > 0:
        for ch in order:
            from .pruning import zero_channel

            zero_channel(model, layer_index, ch)
            pruned.append(ch)
            accs.append(evaluate(model, eval_data))
            asrs.append(attack_success_rate(model, eval_data, trigger))
            if base_acc - accs[-1] >= acc_budget:
                break
    if finetune_epochs > 0:
        model, ft = finetune_defense(model, clean_data, trigger, eval_data,
                                     epochs=finetune_epochs, cfg=cfg)
        accs.append(ft.verdicts["accuracy_after"])
        asrs.append(ft.verdicts["asr_after"])
    report = DefenseReport(
        defense_name="fineprune",
        sweep_values=list(range(len(accs))),
        accuracy=accs,
        asr=asrs,
        verdicts={"applicable": True, "pruned_channels": pruned,
                  "layer": layer_index, "prune_order": order,
                  "asr_after": asrs[-1], "accuracy_after": accs[-1]},
        runtime_s=time.time() - t0,
    )
    return model, report


def _with_restored_params(model, fn):
    saved = model.get_params()
    try:
        return fn()
    finally:
        model.set_params(saved)


def noise_defense(model, test, trigger, sigmas=None, runs=5, seed=0, drop_threshold=0.05):
    """Blend Gaussian noise of growing sigma into every parameter; report the
    ASR at the smallest sigma whose mean accuracy drop reaches the threshold."""
    t0 = time.time()
    if sigmas is None:
        sigmas = np.geomspace(0.01, 5.0, 12)
    sigmas = [float(s) for s in sigmas]
    theta = model.get_params()
    base_acc = evaluate(model, test)
    acc_mean, asr_mean = [], []
    seeds = list(range(seed, seed + runs))
    for sigma in sigmas:
        accs, asrs = [], []
        for run_seed in seeds:
            rng = np.random.default_rng((run_seed, int(sigma * 1e9)))
            model.set_params(theta + rng.normal(0.0, sigma, size=theta.shape) if sigma > 0 else theta)
            accs.append(evaluate(model, test))
            asrs.append(attack_success_rate(model, test, trigger))
        model.set_params(theta)
        acc_mean.append(float(np.mean(accs)))
        asr_mean.append(float(np.mean(asrs)))
    verdicts = {"asr_at_drop": None, "sigma_at_drop": None, "baseline_accuracy": base_acc}
    for sigma, acc, asr in zip(sigmas, acc_mean, asr_mean):
        if base_acc - acc >= drop_threshold:
            verdicts["sigma_at_drop"] = sigma
            verdicts["asr_at_drop"] = asr
            break
    report = DefenseReport(
        defense_name="noise",
        sweep_values=sigmas,
        accuracy=acc_mean,
        asr=asr_mean,
        verdicts=verdicts,
        seeds=seeds,
        runtime_s=time.time() - t0,
    )
    return report


def clip_defense(model, test, trigger, factors=None, drop_threshold=0.05):
    """Clip every parameter to factor * global max |parameter|, factor from
    1.0 down; report the ASR at the first factor that costs the threshold."""
    t0 = time.time()
    if factors is None:
        factors = [round(0.1 * k, 1) for k in range(1, 11)]
    factors = sorted(float(f) for f in factors)
    theta = model.get_params()
    alpha_base = float(np.abs(theta).max())
    base_acc = evaluate(model, test)
    accs, asrs = [], []
    for factor in factors:
        bound = factor * alpha_base
        model.set_params(np.clip(theta, -bound, bound))
        accs.append(evaluate(model, test))
        asrs.append(attack_success_rate(model, test, trigger))
    model.set_params(theta)
    verdicts = {"asr_at_drop": None, "factor_at_drop": None, "baseline_accuracy": base_acc}
    # scan from the gentlest clipping down; the first crossing is the readout
    for factor, acc, asr in sorted(zip(factors, accs, asrs), reverse=True):
        if base_acc - acc >= drop_threshold:
            verdicts["factor_at_drop"] = factor
            verdicts["asr_at_drop"] = asr
            break
    report = DefenseReport(
        defense_name="clip",
        sweep_values=factors,
        accuracy=accs,
        asr=asrs,
        verdicts=verdicts,
        seeds=[],
        runtime_s=time.time() - t0,
    )
    return report


def weight_stats_report(model, reference=None, ks_threshold=0.05, bins=50):
    """Per-layer weight histograms, Gaussian fits and KS distances.

    A layer is flagged when its KS statistic against its own fitted Gaussian
    exceeds the threshold; with a reference model, two-sample KS distances
    between corresponding layers are also reported.
    """
    t0 = time.time()
    layers = {}
    flagged = []
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, (Dense, Conv2D)):
            continue
        w = layer.weights.ravel()
        mu, sigma = float(w.mean()), float(w.std())
        ks = float(sstats.kstest(w, "norm", args=(mu, max(sigma, 1e-12))).statistic)
        hist, edges = np.histogram(w, bins=bins)
        entry = {
            "mean": mu, "std": sigma, "ks": ks,
            "hist": hist.tolist(), "bin_edges": edges.tolist(),
            "max_abs": float(np.abs(w).max()),
        }
        if reference is not None:
            ref_w = reference.layers[i].weights.ravel()
            entry["ks_vs_reference"] = float(sstats.ks_2samp(w, ref_w).statistic)
        layers[str(i)] = entry
        if ks > ks_threshold:
            flagged.append(i)
    report = DefenseReport(
        defense_name="weight_stats",
        verdicts={"detected": bool(flagged), "flagged_layers": flagged,
                  "ks_threshold": ks_threshold},
        extra={"layers": layers},
        runtime_s=time.time() - t0,
    )
    return report


def reconstruct_triggers(model, sample16, trigger, test, adv=None, seed=0):
    """Recover candidate patches by running targeted PGD on a handful of
    samples, cropping the trigger box, and replaying each crop on the test
    set; reports the per-patch success rates."""
    t0 = time.time()
    adv = adv or AdvConfig(norm="l2", steps=100, seed=seed)
    images = sample16.images
    targets = np.full(len(images), trigger.target_label)
    adv_images = pgd(model, images, targets, adv, targeted=True)
    r0, c0, h, w = trigger.bbox
    rates = []
    patches = []
    for i in range(len(adv_images)):
        patch = adv_images[i, r0 : r0 + h, c0 : c0 + w, :]
        patches.append(patch)
        candidate = TriggerSpec(pattern=_embed(patch, trigger.pattern.shape, r0, c0),
                                mask=trigger.mask.copy(),
                                target_label=trigger.target_label)
        rates.append(attack_success_rate(model, test, candidate))
    report = DefenseReport(
        defense_name="reconstruct_triggers",
        sweep_values=list(range(len(rates))),
        asr=rates,
        accuracy=[],
        verdicts={"best_patch_asr": max(rates), "mean_patch_asr": float(np.mean(rates))},
        seeds=[adv.seed],
        runtime_s=time.time() - t0,
    )
    return patches, report


def _embed(patch, image_shape, r0, c0):
    canvas = np.zeros(image_shape)
    canvas[r0 : r0 + patch.shape[0], c0 : c0 + patch.shape[1], :] = patch
    return canvas


def misclassification_bias(model, test, target_label, adv=None):
    """Class histogram of untargeted PGD misclassifications; the bias score is
    the target class's share minus the uniform share."""
    t0 = time.time()
    adv = adv or AdvConfig(norm="linf", steps=10)
    adv_images = pgd(model, test.images, test.labels, adv, targeted=False)
    preds = predict(model, adv_images)
    missed = preds[preds != test.labels]
    hist = np.bincount(missed, minlength=test.num_classes)
    total = max(len(missed), 1)
    share = hist[target_label] / total
    bias = float(share - 1.0 / test.num_classes)
    report = DefenseReport(
        defense_name="misclassification_bias",
        verdicts={"bias_score": bias, "target_share": float(share),
                  "misclassified": int(len(missed))},
        seeds=[adv.seed],
        extra={"histogram": hist.tolist()},
        runtime_s=time.time() - t0,
    )
    return hist, report


def hessian_probe(model, clean_batch, triggered_batch, repeats=20, iters=30, seed=0):
    """Top loss-Hessian eigenvalue on a clean and a triggered batch, averaged
    over `repeats` power-iteration restarts."""
    t0 = time.time()

    def estimate(ds):
        vals, converged = [], []
        for r in range(repeats):
            est = top_eigenvalue(model, _batch_inputs(model, ds), ds.labels,
                                 iters=iters, seed=seed + r)
            vals.append(est.value)
            converged.append(est.converged)
        return vals, converged

    clean_vals, clean_conv = estimate(clean_batch)
    trig_vals, trig_conv = estimate(triggered_batch)
    report = DefenseReport(
        defense_name="hessian_probe",
        verdicts={
            "lambda_clean": float(np.mean(clean_vals)),
            "lambda_clean_std": float(np.std(clean_vals)),
            "lambda_triggered": float(np.mean(trig_vals)),
            "lambda_triggered_std": float(np.std(trig_vals)),
            "all_converged": bool(all(clean_conv) and all(trig_conv)),
        },
        seeds=[seed + r for r in range(repeats)],
        extra={"clean_values": clean_vals, "triggered_values": trig_vals},
        runtime_s=time.time() - t0,
    )
    return report


def triggered_batch_of(dataset, trigger, n=128, seed=0):
    """Poison-style probe batch: triggered images labeled as the target."""
    sub = dataset.sample(n, seed)
    images = apply_trigger(sub.images, trigger)
    labels = np.full(len(sub), trigger.target_label)
    return Dataset(images=images, labels=labels, num_classes=dataset.num_classes)


def _batch_inputs(model, ds):
    from .zoo import model_inputs

    return model_inputs(model, ds.images)
