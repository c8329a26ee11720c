import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from weightforge.analysis import (
    ActivationStats,
    NeuronId,
    SeparationScore,
    ablate_filters,
    ablate_neurons,
    activation_stats,
    normal_overlap,
    select_target_neurons,
    separation_scores,
    unit_activations,
)
from weightforge.data import Dataset, synth_dataset
from weightforge.layers import Conv2D, Dense, Flatten
from weightforge.model import Model
from weightforge.triggers import apply_trigger, make_trigger


def integrate_min_pdf(mu1, s1, mu2, s2, step=1e-4):
    """Numerical-integration oracle for the overlap coefficient."""
    lo = min(mu1 - 12 * s1, mu2 - 12 * s2)
    hi = max(mu1 + 12 * s1, mu2 + 12 * s2)
    n = int((hi - lo) / min(step, min(s1, s2) / 50)) + 1
    n = min(n, 4_000_000)
    x = np.linspace(lo, hi, n)
    y = np.minimum(norm.pdf(x, mu1, s1), norm.pdf(x, mu2, s2))
    return float(np.trapezoid(y, x))


def test_overlap_identical_distributions():
    assert normal_overlap(1.0, 2.0, 1.0, 2.0) == 1.0


def test_overlap_unit_gaussians_two_apart():
    # oracle: integrate min(pdf) over [-10, 12] at step 1e-4
    val = normal_overlap(0.0, 1.0, 2.0, 1.0)
    assert abs(val - 0.3173) < 2e-4
    assert abs(val - integrate_min_pdf(0.0, 1.0, 2.0, 1.0)) < 1e-6


def test_overlap_far_apart_narrow():
    assert normal_overlap(0.0, 0.01, 100.0, 0.01) < 1e-12


def test_overlap_rejects_negative_sigma():
    with pytest.raises(ValueError):
        normal_overlap(0.0, -1.0, 0.0, 1.0)


def test_overlap_matches_integration_oracle_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        mu1, mu2 = rng.uniform(-20, 20, size=2)
        s1, s2 = rng.uniform(0.01, 10, size=2)
        closed = normal_overlap(mu1, s1, mu2, s2)
        numeric = integrate_min_pdf(mu1, s1, mu2, s2)
        assert abs(closed - numeric) < 1e-6, (mu1, s1, mu2, s2)


@settings(max_examples=60, deadline=None)
@given(
    mu1=st.floats(-20, 20), mu2=st.floats(-20, 20),
    s1=st.floats(0.01, 10), s2=st.floats(0.01, 10),
    shift=st.floats(-5, 5),
)
def test_overlap_symmetry_and_translation_invariance(mu1, mu2, s1, s2, shift):
    a = normal_overlap(mu1, s1, mu2, s2)
    b = normal_overlap(mu2, s2, mu1, s1)
    assert abs(a - b) < 1e-9
    c = normal_overlap(mu1 + shift, s1, mu2 + shift, s2)
    assert abs(a - c) < 1e-9


def two_layer_model(w0, b0, w1, b1):
    return Model(
        [Dense(w0, b0, "relu"), Dense(w1, b1, "none")],
        input_shape=[w0.shape[1]], num_classes=w1.shape[0],
    )


def test_dead_outgoing_neuron_is_candidate():
    rng = np.random.default_rng(1)
    w0 = rng.standard_normal((4, 3))
    w1 = rng.standard_normal((2, 4))
    w1[:, 2] = 0.0  # unit 2 never reaches the logits
    model = two_layer_model(w0, np.zeros(4), w1, np.zeros(2))
    X = Dataset(images=rng.random((40, 1, 3, 1)), labels=rng.integers(0, 2, 40), num_classes=2)
    cands = ablate_neurons(model, X, acc_threshold=0.0)
    assert NeuronId(0, 2) in cands


def test_bottleneck_neuron_excluded_when_ablation_flips():
    # single hidden unit owning the decision: zeroing it flips class-1 inputs
    w0 = np.array([[1.0]])
    w1 = np.array([[0.0], [2.0]])
    b1 = np.array([1.0, 0.0])  # with unit off, class 0 wins; with x=2, class 1 wins
    model = two_layer_model(w0, np.zeros(1), w1, b1)
    X = Dataset(images=np.full((10, 1, 1, 1), 1.0), labels=np.ones(10, dtype=int), num_classes=2)
    assert model and ablate_neurons(model, X, acc_threshold=0.0) == []


def test_candidates_invariant_under_sample_permutation():
    rng = np.random.default_rng(2)
    w0 = rng.standard_normal((6, 4))
    w1 = rng.standard_normal((3, 6))
    model = two_layer_model(w0, np.zeros(6), w1, np.zeros(3))
    images = rng.random((30, 2, 2, 1))
    labels = rng.integers(0, 3, 30)
    X = Dataset(images=images, labels=labels, num_classes=3)
    perm = rng.permutation(30)
    Xp = Dataset(images=images[perm], labels=labels[perm], num_classes=3)
    assert ablate_neurons(model, X) == ablate_neurons(model, Xp)


def test_ablation_restores_model_bit_exactly():
    rng = np.random.default_rng(3)
    w0 = rng.standard_normal((6, 4))
    w1 = rng.standard_normal((3, 6))
    model = two_layer_model(w0, np.zeros(6), w1, np.zeros(3))
    X = Dataset(images=rng.random((20, 2, 2, 1)), labels=rng.integers(0, 3, 20), num_classes=3)
    before = model.get_params()
    ablate_neurons(model, X)
    assert np.array_equal(model.get_params(), before)


def conv_model(rng, filters=4):
    w0 = 0.4 * rng.standard_normal((filters, 1, 3, 3))
    flat = 6 * 6 * filters
    w1 = 0.2 * rng.standard_normal((3, flat))
    return Model(
        [Conv2D(w0, np.zeros(filters), "relu"), Flatten(), Dense(w1, np.zeros(3), "none")],
        input_shape=[8, 8, 1], num_classes=3,
    )


def test_dead_channel_is_filter_candidate():
    rng = np.random.default_rng(4)
    model = conv_model(rng)
    model.layers[0].weights[1] = 0.0
    model.layers[0].bias[1] = 0.0
    X = Dataset(images=rng.random((25, 8, 8, 1)), labels=rng.integers(0, 3, 25), num_classes=3)
    cands = ablate_filters(model, X, acc_threshold=0.05)
    assert NeuronId(0, 1) in cands


def test_filter_candidates_monotone_in_threshold():
    rng = np.random.default_rng(5)
    model = conv_model(rng, filters=6)
    X = Dataset(images=rng.random((30, 8, 8, 1)), labels=rng.integers(0, 3, 30), num_classes=3)
    c1 = set(ablate_filters(model, X, acc_threshold=0.01))
    c2 = set(ablate_filters(model, X, acc_threshold=0.10))
    assert c1 <= c2


def test_ablate_filters_warns_without_conv():
    rng = np.random.default_rng(6)
    model = two_layer_model(rng.standard_normal((4, 3)), np.zeros(4),
                            rng.standard_normal((2, 4)), np.zeros(2))
    X = Dataset(images=rng.random((10, 1, 3, 1)), labels=rng.integers(0, 2, 10), num_classes=2)
    with pytest.warns(UserWarning, match="no convolutional"):
        assert ablate_filters(model, X) == []


def test_activation_stats_constant_and_recount():
    rng = np.random.default_rng(7)
    w0 = rng.standard_normal((3, 4))
    model = two_layer_model(w0, np.zeros(3), rng.standard_normal((2, 3)), np.zeros(2))
    clean = rng.random((50, 2, 2, 1))
    spec = make_trigger("square", 1, (0, 0), (2, 2, 1))
    backdoor = apply_trigger(clean, spec)
    neurons = [NeuronId(0, i) for i in range(3)]
    stats = activation_stats(model, 0, neurons, clean, backdoor)
    # two-pass streaming recount oracle
    acts_c = unit_activations(model, 0, clean)
    acts_b = unit_activations(model, 0, backdoor)
    for s in stats:
        u = s.neuron.unit_index
        mean_c = sum(acts_c[:, u]) / len(acts_c)
        var_c = sum((a - mean_c) ** 2 for a in acts_c[:, u]) / len(acts_c)
        assert np.isclose(s.clean_mean, mean_c) and np.isclose(s.clean_std, np.sqrt(var_c))
    # swapping clean/backdoor swaps the stat pairs
    swapped = activation_stats(model, 0, neurons, backdoor, clean)
    for s, t in zip(stats, swapped):
        assert (s.clean_mean, s.clean_std) == (t.backdoor_mean, t.backdoor_std)
        assert (s.backdoor_mean, s.backdoor_std) == (t.clean_mean, t.clean_std)


def test_constant_activation_zero_std():
    model = two_layer_model(np.zeros((2, 4)), np.array([3.0, 0.0]),
                            np.ones((2, 2)), np.zeros(2))
    clean = np.random.default_rng(8).random((20, 2, 2, 1))
    stats = activation_stats(model, 0, [NeuronId(0, 0)], clean, clean)
    assert stats[0].clean_mean == 3.0 and stats[0].clean_std == 0.0


def test_select_targets_full_fraction_and_rounding():
    scores = [
        SeparationScore(neuron=NeuronId(0, i), overlap=1.0 - sep)
        for i, sep in enumerate([0.1, 0.9, 0.5, 0.7, 0.2, 0.3, 0.4, 0.6, 0.8, 0.05])
    ]
    assert len(select_target_neurons(scores, 1.0)) == 10
    top = select_target_neurons(scores, 0.03)  # ceil(0.3) = 1
    assert top == [NeuronId(0, 1)]
    # sort-then-take oracle
    expected = [s.neuron for s in sorted(scores, key=lambda s: -s.separation)][:3]
    assert select_target_neurons(scores, 0.3) == expected


def test_select_targets_tie_break_lower_unit():
    scores = [
        SeparationScore(neuron=NeuronId(0, 5), overlap=0.2),
        SeparationScore(neuron=NeuronId(0, 1), overlap=0.2),
    ]
    assert select_target_neurons(scores, 0.5) == [NeuronId(0, 1)]


def test_select_targets_empty_rejected():
    with pytest.raises(ValueError):
        select_target_neurons([], 0.5)
