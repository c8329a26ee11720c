import numpy as np
import pytest

from weightforge.analysis import NeuronId, normal_overlap, unit_activations
from weightforge.data import synth_dataset
from weightforge.handcraft import (
    AttackConfig,
    InjectionError,
    InjectionReport,
    _dense_stage,
    amplify_logit,
    craft_filter_from_trigger,
    inject_backdoor,
    inject_conv_filters,
    set_guard_bias,
)
from weightforge.layers import Conv2D
from weightforge.model import forward
from weightforge.triggers import apply_trigger, attack_success_rate, make_trigger
from weightforge.zoo import TrainConfig, build_fc, evaluate, model_inputs, train

SHAPE = (28, 28, 1)


@pytest.fixture(scope="module")
def blob_fc():
    train_ds = synth_dataset(10, 1500, seed=20)
    model = build_fc(784, 32, 10, seed=3)
    train(model, train_ds, TrainConfig(epochs=6, batch_size=64, lr=0.05, seed=3))
    return model, train_ds


@pytest.fixture(scope="module")
def mnist_fc(mnist_train, mnist_test):
    model = build_fc(784, 32, 10, seed=0)
    train(model, mnist_train, TrainConfig(epochs=6, batch_size=128, lr=0.05, seed=0))
    return model, mnist_test.sample(250, seed=123), mnist_test


@pytest.fixture(scope="module")
def trigger():
    return make_trigger("checkerboard", 4, (24, 24), SHAPE, target_label=0)


def test_guard_bias_formula(blob_fc):
    model, _ = blob_fc
    m = model.copy()
    targets = [NeuronId(0, 3), NeuronId(0, 5)]
    stats = {3: (2.0, 0.5), 5: (0.0, 0.0)}
    set_guard_bias(m, 0, targets, stats, k=2.0)
    assert m.layers[0].bias[3] == pytest.approx(-3.0)
    assert m.layers[0].bias[5] == 0.0


def test_overlap_invariant_under_common_scaling():
    # scaling both activation distributions cannot change their overlap, so
    # multiplier growth alone is not what creates separation at layer inputs
    base = normal_overlap(0.0, 1.0, 1.0, 1.0)
    for c in (2.0, 7.5, 0.3):
        assert normal_overlap(0.0, c, c * 1.0, c) == pytest.approx(base, abs=1e-9)


def test_inject_backdoor_requires_50_samples(blob_fc, trigger):
    model, train_ds = blob_fc
    with pytest.raises(InjectionError, match="50"):
        inject_backdoor(model.copy(), train_ds.subset(range(20)), trigger)


def test_inject_backdoor_end_to_end_on_blobs(blob_fc, trigger):
    model, train_ds = blob_fc
    test_ds = synth_dataset(10, 400, seed=21)
    m = model.copy()
    base_acc = evaluate(m, test_ds)
    m, report = inject_backdoor(m, train_ds.subset(range(250)), trigger,
                                AttackConfig(n_per_layer={0: 8}), eval_dataset=test_ds)
    asr = attack_success_rate(m, test_ds, trigger)
    assert asr >= 0.96
    assert evaluate(m, test_ds) >= base_acc - 0.05
    assert report.asr_after == asr
    assert report.accuracy_before == base_acc


def test_architecture_preserved_by_injection(blob_fc, trigger):
    model, train_ds = blob_fc
    m = model.copy()
    kinds_before = [l.kind for l in m.layers]
    shapes_before = [p.shape for l in m.layers for _, p in l.params()]
    inject_backdoor(m, train_ds.subset(range(250)), trigger, AttackConfig(n_per_layer={0: 8}))
    assert [l.kind for l in m.layers] == kinds_before
    assert [p.shape for l in m.layers for _, p in l.params()] == shapes_before


def test_weight_cap_never_exceeded(blob_fc, trigger):
    model, train_ds = blob_fc
    m = model.copy()
    caps = [np.abs(l.weights).max() for l in m.layers]
    inject_backdoor(m, train_ds.subset(range(250)), trigger, AttackConfig(n_per_layer={0: 8}))
    for layer, cap in zip(m.layers, caps):
        assert np.abs(layer.weights).max() <= cap + 1e-12


def test_guard_quiets_clean_activations_on_blobs(blob_fc, trigger):
    # blob classes whose blob reaches the trigger corner keep firing, so the
    # guard only suppresses; the >=99% silence bar belongs to the MNIST run
    model, train_ds = blob_fc
    m = model.copy()
    _, report = inject_backdoor(m, train_ds.subset(range(250)), trigger,
                                AttackConfig(n_per_layer={0: 8}))
    holdout = synth_dataset(10, 400, seed=22)
    units = report.targets[0]
    before = unit_activations(model, 0, holdout.images)[:, units]
    after = unit_activations(m, 0, holdout.images)[:, units]
    assert (after == 0.0).mean() > (before == 0.0).mean()


def test_guarded_neurons_silent_on_clean_mnist(mnist_fc, trigger):
    model, sample, test = mnist_fc
    m = model.copy()
    _, report = inject_backdoor(m, sample, trigger, AttackConfig(n_per_layer={0: 8}))
    acts = unit_activations(m, 0, test.images[:2000])[:, report.targets[0]]
    assert np.mean(np.all(acts == 0.0, axis=1)) >= 0.99


def test_label_independence_of_amplification(blob_fc, trigger):
    model, train_ds = blob_fc
    test_ds = synth_dataset(10, 400, seed=23)
    sample = train_ds.subset(range(250))
    cfg = AttackConfig(n_per_layer={0: 8})
    prepared = model.copy()
    X_bd = apply_trigger(sample.images, trigger)
    report = InjectionReport()
    targets = _dense_stage(prepared, 0, sample, X_bd, cfg, report)
    for label in (0, 3):
        m = prepared.copy()
        retargeted = make_trigger("checkerboard", 4, (24, 24), SHAPE, target_label=label)
        amplify_logit(m, targets, label, cfg.logit_margin, sample.images, X_bd)
        assert attack_success_rate(m, test_ds, retargeted) >= 0.96


def test_amplify_zero_activation_leaves_clean_logits(blob_fc):
    model, train_ds = blob_fc
    m = model.copy()
    # silence two units completely, then try to exploit them
    units = [0, 1]
    m.layers[0].weights[units] = 0.0
    m.layers[0].bias[units] = -1.0
    clean = train_ds.images[:100]
    before = forward(m, model_inputs(m, clean)).logits.copy()
    amplify_logit(m, [NeuronId(0, u) for u in units], 0, 2.0, clean, clean)
    after = forward(m, model_inputs(m, clean)).logits
    assert np.array_equal(before, after)


def test_separation_reported_at_threshold(blob_fc, trigger):
    model, train_ds = blob_fc
    m = model.copy()
    cfg = AttackConfig(n_per_layer={0: 8})
    _, report = inject_backdoor(m, train_ds.subset(range(250)), trigger, cfg)
    for key, sep in report.separations.items():
        assert sep >= cfg.sep_threshold


def conv_host_layer(seed=0):
    rng = np.random.default_rng(seed)
    return Conv2D(0.3 * rng.standard_normal((4, 1, 5, 5)) - 0.05, np.zeros(4), "relu")


def test_craft_filter_zero_scale_gives_zero_filter(trigger):
    layer = conv_host_layer()
    filt = craft_filter_from_trigger(trigger, layer, 0.0)
    assert np.allclose(filt, 0.0)


def test_craft_filter_range_and_order(trigger):
    layer = conv_host_layer()
    filt = craft_filter_from_trigger(trigger, layer, 0.8)
    assert filt.min() == pytest.approx(0.8 * layer.weights.min())
    assert filt.max() == pytest.approx(0.8 * layer.weights.max())
    # affine rescale preserves the ordering of the embedded patch
    patch = np.zeros((5, 5))
    patch[:4, :4] = trigger.pattern[24:28, 24:28, 0]
    assert np.array_equal(np.argsort(filt, axis=None, kind="stable"),
                      np.argsort(patch, axis=None, kind="stable"))


def test_craft_filter_constant_patch_warns():
    layer = conv_host_layer()
    spec = make_trigger("square", 5, (23, 23), SHAPE, target_label=0)
    with pytest.warns(UserWarning, match="constant"):
        filt = craft_filter_from_trigger(spec, layer, 0.5)
    assert np.allclose(filt, 0.5 * layer.weights.max())


def test_craft_filter_autocorrelation_peak(trigger):
    # the matched filter's strongest response over a triggered image sits at
    # the trigger location, and beats its best response on the clean image
    layer = conv_host_layer(seed=9)
    filt = craft_filter_from_trigger(trigger, layer, 1.0)
    clean = synth_dataset(10, 10, seed=30).images[3]
    triggered = apply_trigger(clean, trigger)

    def responses(img):
        out = np.zeros((24, 24))
        for r in range(24):
            for c in range(24):
                out[r, c] = np.sum(img[r : r + 5, c : c + 5, 0] * filt)
        return out

    resp_clean = responses(clean)
    resp_trig = responses(triggered)
    peak = np.unravel_index(np.argmax(resp_trig), resp_trig.shape)
    assert resp_trig.max() > resp_clean.max()
    assert 19 <= peak[0] <= 23 and 19 <= peak[1] <= 23  # within reach of the 24..27 box


def test_inject_conv_filters_noop_with_zero_budget(trigger):
    from weightforge.zoo import build_cnn

    model = build_cnn((16, 16, 1), 4, seed=5, dense_units=32)
    sample = synth_dataset(4, 80, seed=31, size=16)
    before = model.get_params()
    cfg = AttackConfig(filters_per_layer=0)
    inject_conv_filters(model, sample, trigger_for(16), cfg)
    assert np.array_equal(model.get_params(), before)


def trigger_for(size):
    return make_trigger("checkerboard", 4, (size - 4, size - 4), (size, size, 1), target_label=0)


def test_injection_error_carries_stage():
    err = InjectionError("logit", "boom")
    assert err.stage == "logit"
    assert "[logit]" in str(err)
