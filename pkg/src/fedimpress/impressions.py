"""Zero-shot synthesis of anonymized data impressions.

The pipeline for one class ``k`` of a trained classifier:

1. cosine similarity between last-layer weight columns (class similarity matrix),
2. a positive Dirichlet concentration vector built from row ``k`` of that matrix,
3. ``N`` softmax targets drawn from the Dirichlet,
4. gradient descent in input space until the model reproduces each target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DegenerateWeightsError, InputError, SynthesisDivergenceError
from .nn import Classifier, LastLayerWeights, check_simplex, last_layer_weights, soft_cross_entropy_and_input_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassSimilarityMatrix:
    matrix: np.ndarray
    label_ids: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SoftmaxTargetBatch:
    """``values[n]`` is the n-th sampled softmax vector for class index ``class_index``."""

    values: np.ndarray
    class_index: int

    def __post_init__(self):
        check_simplex(self.values, atol=1e-9)


@dataclass(frozen=True)
class SynthesisConfig:
    samples_per_class: int = 100
    dirichlet_scale: float = 1.0
    concentration_floor: float = 0.01
    max_steps: int = 500
    step_size: float = 0.05
    loss_tolerance: float = 1e-3
    init_range: tuple[float, float] = (-1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init_range", tuple(float(v) for v in self.init_range))
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        if self.dirichlet_scale <= 0 or self.concentration_floor <= 0:
            raise ConfigurationError("dirichlet_scale and concentration_floor must be positive")
        if self.concentration_floor >= 1:
            raise ConfigurationError("concentration_floor must be below 1")
        if self.max_steps < 0 or self.step_size <= 0 or self.loss_tolerance <= 0:
            raise ConfigurationError("max_steps >= 0, step_size > 0 and loss_tolerance > 0 required")
        lo, hi = self.init_range
        if not lo < hi:
            raise ConfigurationError(f"init_range must satisfy lo < hi, got {self.init_range}")


@dataclass
class DataImpressionBatch:
    """Synthesized inputs for one new-class slot of one user."""

    features: np.ndarray
    class_index: int
    user: int | None = None
    iteration: int | None = None
    losses: np.ndarray | None = None
    initial_losses: np.ndarray | None = None
    trace: np.ndarray | None = None

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]


def class_similarity_matrix(weights: LastLayerWeights | np.ndarray) -> ClassSimilarityMatrix:
    """Cosine similarity between every pair of class weight columns."""
    if not isinstance(weights, LastLayerWeights):
        weights = LastLayerWeights(weights)
    W = weights.matrix
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        bad = [weights.label_ids[j] for j in np.flatnonzero(~(norms > 0))]
        raise DegenerateWeightsError(f"zero-norm weight column(s) for labels {bad}")
    U = W / norms
    C = U.T @ U
    C = np.clip(0.5 * (C + C.T), -1.0, 1.0)
    np.fill_diagonal(C, 1.0)
    return ClassSimilarityMatrix(C, weights.label_ids)


def concentration_vector(
    csm: ClassSimilarityMatrix, k: int, dirichlet_scale: float = 1.0, floor: float = 0.01
) -> np.ndarray:
    """Row ``k`` of the similarity matrix min-max scaled to ``[floor, 1]``, times ``dirichlet_scale``."""
    K = csm.num_classes
    if not 0 <= k < K:
        raise InputError(f"class index {k} out of range for {K} classes")
    if dirichlet_scale <= 0 or not 0 < floor < 1:
        raise InputError("dirichlet_scale must be positive and floor in (0, 1)")
    row = csm.matrix[k]
    lo, hi = row.min(), row.max()
    if hi - lo <= 0:
        log.warning("constant similarity row for class %d; using a flat concentration", k)
        return np.full(K, float(dirichlet_scale))
    scaled = floor + (1.0 - floor) * (row - lo) / (hi - lo)
    return dirichlet_scale * scaled


def sample_softmax(concentration, n: int, seed: int = 0, class_index: int = 0) -> SoftmaxTargetBatch:
    """Draw ``n`` Dirichlet vectors by normalizing independent Gamma variates."""
    alpha = np.asarray(concentration, dtype=float)
    if alpha.ndim != 1 or alpha.size < 1:
        raise InputError("concentration must be a non-empty vector")
    if not np.all(alpha > 0) or not np.all(np.isfinite(alpha)):
        raise InputError("Dirichlet concentration must be strictly positive")
    if n < 1:
        raise InputError("need at least one sample")
    rng = np.random.default_rng(seed)
    g = rng.standard_gamma(alpha, size=(n, alpha.size))
    total = g.sum(axis=1, keepdims=True)
    # tiny concentrations can underflow every component to zero
    empty = total[:, 0] == 0
    if np.any(empty):
        g[empty] = 0.0
        g[empty, int(np.argmax(alpha))] = 1.0
        total[empty] = 1.0
    return SoftmaxTargetBatch(g / total, class_index)


def synthesize_impressions(
    model: Classifier,
    targets: SoftmaxTargetBatch,
    cfg: SynthesisConfig,
    *,
    init_range: tuple[float, float] | None = None,
    user: int | None = None,
    iteration: int | None = None,
    keep_trace: bool = False,
) -> DataImpressionBatch:
    """Find inputs whose model output matches each target row.

    Each row starts from a seeded uniform draw in ``init_range`` (default
    ``cfg.init_range``) and follows gradient descent on the cross-entropy
    until its loss drops below ``cfg.loss_tolerance`` or ``cfg.max_steps``
    steps are spent. The lowest-loss iterate of each row is returned.
    """
    Y = np.asarray(targets.values, dtype=float)
    if Y.ndim != 2 or Y.shape[1] != model.num_classes:
        raise InputError(f"targets have {Y.shape[-1]} classes, model has {model.num_classes}")
    lo, hi = cfg.init_range if init_range is None else init_range
    if not lo < hi:
        raise ConfigurationError(f"init_range must satisfy lo < hi, got {(lo, hi)}")
    rng = np.random.default_rng(cfg.seed)
    X = rng.uniform(lo, hi, size=(Y.shape[0], model.spec.input_dim))

    loss, grad = soft_cross_entropy_and_input_grad(model, X, Y)
    _check_finite(loss)
    initial = loss.copy()
    best_x, best_loss = X.copy(), loss.copy()
    trace = [loss.copy()] if keep_trace else None
    for _ in range(cfg.max_steps):
        active = best_loss >= cfg.loss_tolerance
        if not active.any():
            break
        X[active] -= cfg.step_size * grad[active]
        loss, grad = soft_cross_entropy_and_input_grad(model, X, Y)
        _check_finite(loss)
        if trace is not None:
            trace.append(loss.copy())
        better = loss < best_loss
        best_x[better] = X[better]
        best_loss[better] = loss[better]
    return DataImpressionBatch(
        features=best_x,
        class_index=targets.class_index,
        user=user,
        iteration=iteration,
        losses=best_loss,
        initial_losses=initial,
        trace=np.array(trace) if trace is not None else None,
    )


def _check_finite(loss: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(loss))
    if bad.size:
        raise SynthesisDivergenceError(
            f"non-finite loss for impression sample {bad[0]}; retry with a smaller step_size",
            sample=int(bad[0]),
        )


def impressions_for_class(
    model: Classifier,
    class_index: int,
    cfg: SynthesisConfig,
    *,
    init_range: tuple[float, float] | None = None,
    user: int | None = None,
    iteration: int | None = None,
) -> DataImpressionBatch:
    """Similarity matrix -> Dirichlet targets -> input descent for one class."""
    csm = class_similarity_matrix(last_layer_weights(model))
    alpha = concentration_vector(csm, class_index, cfg.dirichlet_scale, cfg.concentration_floor)
    targets = sample_softmax(alpha, cfg.samples_per_class, seed=cfg.seed, class_index=class_index)
    # distinct stream for the init draw than for the Dirichlet draw
    synth_cfg = replace(cfg, seed=cfg.seed + 1)
    return synthesize_impressions(
        model, targets, synth_cfg, init_range=init_range, user=user, iteration=iteration
    )


def average_impressions(batches) -> np.ndarray:
    """Element-wise mean of equally shaped impression batches."""
    mats = [b.features if isinstance(b, DataImpressionBatch) else np.asarray(b, dtype=float) for b in batches]
    if not mats:
        raise InputError("no impression batches to average")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise InputError(f"impression batches differ in shape: {[m.shape for m in mats]}")
    return np.mean(mats, axis=0)
