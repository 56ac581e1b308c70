import logging

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedimpress.data import generate_synthetic_dataset
from fedimpress.errors import ConfigurationError, DegenerateWeightsError, InputError, SynthesisDivergenceError
from fedimpress.impressions import (
    ClassSimilarityMatrix,
    DataImpressionBatch,
    SoftmaxTargetBatch,
    SynthesisConfig,
    average_impressions,
    class_similarity_matrix,
    concentration_vector,
    impressions_for_class,
    sample_softmax,
    synthesize_impressions,
)
from fedimpress.nn import (
    Classifier,
    LastLayerWeights,
    ModelSpec,
    TrainConfig,
    build_classifier,
    forward,
    linear_head,
    train,
)


@pytest.fixture(scope="module")
def two_class_model():
    d = generate_synthetic_dataset(2, 200, 4, 6.0, seed=11)
    return train(build_classifier(ModelSpec(4, 2), (0, 1)), d.features, d.labels, TrainConfig(epochs=30))


# --- class similarity ------------------------------------------------------

def test_orthogonal_columns_give_identity():
    c = class_similarity_matrix(np.diag([2.0, 0.5, 3.0]))
    assert np.array_equal(c.matrix, np.eye(3))


def test_hand_cosine():
    c = class_similarity_matrix(np.array([[1.0, 1.0], [0.0, 1.0]]))
    assert c.matrix[0, 1] == pytest.approx(0.7071067811865475, abs=1e-15)


def test_duplicated_column_has_similarity_one():
    w = np.random.default_rng(0).normal(size=(5, 1))
    c = class_similarity_matrix(np.hstack([w, w, -w]))
    assert c.matrix[0, 1] == pytest.approx(1.0)
    assert c.matrix[0, 2] == pytest.approx(-1.0)


def test_zero_column_is_degenerate():
    with pytest.raises(DegenerateWeightsError):
        class_similarity_matrix(LastLayerWeights(np.array([[1.0, 0.0], [2.0, 0.0]]), (3, 8)))


def test_label_ids_carried_over():
    c = class_similarity_matrix(LastLayerWeights(np.eye(2), (6, 2)))
    assert c.label_ids == (6, 2)


@settings(max_examples=100, deadline=None)
@given(
    W=arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)),
             elements=st.floats(-10, 10, allow_nan=False)),
    scale=st.floats(1e-3, 1e3),
)
def test_similarity_invariants(W, scale):
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        with pytest.raises(DegenerateWeightsError):
            class_similarity_matrix(W)
        return
    assume(np.all(norms > 1e-6))
    C = class_similarity_matrix(W).matrix
    assert np.allclose(C, C.T, atol=1e-9)
    assert np.allclose(np.diag(C), 1.0, atol=1e-9)
    assert np.all(C <= 1.0) and np.all(C >= -1.0)
    assert np.allclose(class_similarity_matrix(scale * W).matrix, C, atol=1e-9)


# --- concentration ---------------------------------------------------------

def test_concentration_from_identity_row():
    csm = ClassSimilarityMatrix(np.eye(3), (0, 1, 2))
    assert concentration_vector(csm, 0, 1.0, 0.01).tolist() == [1.0, 0.01, 0.01]


def test_concentration_scales_linearly():
    csm = class_similarity_matrix(np.random.default_rng(1).normal(size=(6, 4)))
    assert concentration_vector(csm, 2, 10.0) == pytest.approx(10 * concentration_vector(csm, 2, 1.0))


def test_constant_row_gives_flat_vector(caplog):
    csm = ClassSimilarityMatrix(np.ones((3, 3)), (0, 1, 2))
    with caplog.at_level(logging.WARNING):
        v = concentration_vector(csm, 1, 0.5)
    assert v.tolist() == [0.5, 0.5, 0.5]
    assert "constant" in caplog.text


def test_concentration_bad_index():
    with pytest.raises(InputError):
        concentration_vector(ClassSimilarityMatrix(np.eye(2), (0, 1)), 2)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), K=st.integers(2, 7), beta=st.floats(0.1, 20), floor=st.floats(1e-3, 0.5))
def test_concentration_is_positive_and_peaks_at_k(seed, K, beta, floor):
    W = np.random.default_rng(seed).normal(size=(5, K))
    csm = class_similarity_matrix(W)
    for k in range(K):
        v = concentration_vector(csm, k, beta, floor)
        assert np.all(v > 0)
        assert v[k] == pytest.approx(beta)
        assert v[k] == v.max()
        assert v.min() == pytest.approx(beta * floor)


# --- Dirichlet targets -----------------------------------------------------

def test_dirichlet_means_match_concentration():
    y = sample_softmax([2.0, 2.0], 10_000, seed=0).values
    assert np.abs(y.mean(axis=0) - 0.5).max() < 0.02
    assert np.abs(y.sum(axis=1) - 1).max() < 1e-9


def test_dirichlet_asymmetric_means():
    alpha = np.array([1.0, 3.0, 6.0])
    y = sample_softmax(alpha, 20_000, seed=4).values
    assert y.mean(axis=0) == pytest.approx(alpha / alpha.sum(), abs=0.01)


def test_single_class_targets_are_one():
    assert np.array_equal(sample_softmax([0.3], 5, seed=1).values, np.ones((5, 1)))


def test_dirichlet_is_seeded():
    a = sample_softmax([1.0, 0.5, 0.2], 50, seed=3).values
    assert np.array_equal(a, sample_softmax([1.0, 0.5, 0.2], 50, seed=3).values)
    assert not np.array_equal(a, sample_softmax([1.0, 0.5, 0.2], 50, seed=4).values)


@pytest.mark.parametrize("alpha", [[1.0, 0.0], [1.0, -2.0], [np.nan, 1.0], []])
def test_dirichlet_rejects_bad_concentration(alpha):
    with pytest.raises(InputError):
        sample_softmax(alpha, 3)


@settings(max_examples=60, deadline=None)
@given(
    alpha=st.lists(st.floats(1e-3, 50), min_size=1, max_size=8),
    n=st.integers(1, 50),
    seed=st.integers(0, 2**31),
)
def test_targets_lie_on_simplex(alpha, n, seed):
    y = sample_softmax(alpha, n, seed=seed).values
    assert y.shape == (n, len(alpha))
    assert np.all(y >= 0)
    assert np.abs(y.sum(axis=1) - 1).max() < 1e-9


def test_target_batch_validates_simplex():
    with pytest.raises(InputError):
        SoftmaxTargetBatch(np.array([[0.5, 0.6]]), 0)


# --- synthesis -------------------------------------------------------------

def test_impressions_are_classified_back(two_class_model):
    for k in (0, 1):
        batch = impressions_for_class(two_class_model, k, SynthesisConfig(samples_per_class=100, seed=k))
        pred = forward(two_class_model, batch.features).predictions()
        assert np.mean(pred == k) >= 0.9
        assert batch.num_samples == 100


def test_loss_trace_non_increasing_on_linear_model():
    W = np.array([[1.5, -0.5, 0.2], [-0.3, 1.0, 0.4], [0.2, 0.1, -1.2], [0.8, -0.9, 0.3]])
    model = linear_head(LastLayerWeights(W))
    targets = sample_softmax([1.0, 0.3, 0.1], 40, seed=2)
    batch = synthesize_impressions(model, targets, SynthesisConfig(max_steps=300, step_size=0.1, seed=1),
                                   keep_trace=True)
    assert np.all(np.diff(batch.trace, axis=0) <= 1e-12)
    assert np.all(batch.losses <= batch.initial_losses)


def test_fixed_point_target_needs_no_progress():
    model = build_classifier(ModelSpec(3, 3, (4,)), range(3))
    cfg = SynthesisConfig(samples_per_class=4, max_steps=50, seed=9)
    x0 = np.random.default_rng(cfg.seed).uniform(-1, 1, size=(4, 3))
    targets = SoftmaxTargetBatch(forward(model, x0).values, 0)
    batch = synthesize_impressions(model, targets, cfg)
    # the init is already optimal for a soft target equal to the model's own output
    assert np.allclose(batch.features, x0, atol=1e-3)
    assert np.all(batch.losses <= batch.initial_losses + 1e-12)


def test_zero_step_budget_returns_init():
    model = build_classifier(ModelSpec(3, 2), range(2))
    cfg = SynthesisConfig(samples_per_class=6, max_steps=0, seed=2, init_range=(-0.5, 0.5))
    targets = sample_softmax([1.0, 0.1], 6, seed=0)
    batch = synthesize_impressions(model, targets, cfg)
    x0 = np.random.default_rng(2).uniform(-0.5, 0.5, size=(6, 3))
    assert np.array_equal(batch.features, x0)
    assert np.array_equal(batch.losses, batch.initial_losses)


def test_synthesis_is_deterministic(two_class_model):
    cfg = SynthesisConfig(samples_per_class=10, max_steps=50, seed=3)
    a = impressions_for_class(two_class_model, 1, cfg)
    b = impressions_for_class(two_class_model, 1, cfg)
    assert np.array_equal(a.features, b.features)


def test_divergence_names_the_sample():
    spec = ModelSpec(2, 2)
    model = Classifier(spec, [np.array([[1e300, -1e300], [0.0, 0.0]])], [np.zeros(2)], (0, 1))
    targets = SoftmaxTargetBatch(np.array([[0.5, 0.5], [0.5, 0.5]]), 0)
    with np.errstate(all="ignore"), pytest.raises(SynthesisDivergenceError) as err:
        synthesize_impressions(model, targets, SynthesisConfig(step_size=1e10, seed=0))
    assert err.value.sample in (0, 1)


def test_target_width_must_match_model():
    model = build_classifier(ModelSpec(3, 2), range(2))
    with pytest.raises(InputError):
        synthesize_impressions(model, sample_softmax([1, 1, 1], 2), SynthesisConfig())


@pytest.mark.parametrize(
    "kwargs",
    [dict(samples_per_class=0), dict(dirichlet_scale=0), dict(step_size=-1), dict(init_range=(1, 1)),
     dict(concentration_floor=1.5)],
)
def test_synthesis_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        SynthesisConfig(**kwargs)


# --- averaging -------------------------------------------------------------

def test_average_of_one_batch_is_unchanged():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(average_impressions([DataImpressionBatch(x, 0)]), x)


def test_average_is_idempotent_and_arithmetic():
    a = np.random.default_rng(1).normal(size=(3, 2))
    assert np.allclose(average_impressions([a, a]), a)
    assert np.array_equal(average_impressions([np.ones((2, 2)), 3 * np.ones((2, 2))]), 2 * np.ones((2, 2)))


def test_average_shape_mismatch():
    with pytest.raises(InputError):
        average_impressions([np.ones((2, 2)), np.ones((3, 2))])
    with pytest.raises(InputError):
        average_impressions([])
