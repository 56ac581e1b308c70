"""k-medoids over per-user impression representatives, silhouette-based
choice of the cluster count, and a 2-D PCA projection for plotting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InputError
from .impressions import DataImpressionBatch


@dataclass
class PointSet:
    points: np.ndarray
    meta: tuple[Any, ...] = field(default=())

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(self.points) < 1:
            raise InputError("a point set needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise InputError("point coordinates must be finite")
        if not self.meta:
            self.meta = tuple(range(len(self.points)))
        if len(self.meta) != len(self.points):
            raise InputError("one metadata entry per point required")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ClusterAssignment:
    k: int
    medoid_indices: tuple[int, ...]
    labels: np.ndarray
    total_cost: float

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


@dataclass
class ClusterSelection:
    k: int
    assignment: ClusterAssignment
    silhouette: float | None
    low_confidence: bool = False
    scores: dict[int, float] = field(default_factory=dict)


@dataclass
class PCAProjection:
    coords: np.ndarray
    explained_variance: tuple[float, ...]
    axes: np.ndarray
    mean: np.ndarray


def _coords(points) -> np.ndarray:
    return points.points if isinstance(points, PointSet) else np.atleast_2d(np.asarray(points, dtype=float))


def representative_points(batches: Sequence[DataImpressionBatch]) -> PointSet:
    """One point per batch: the column-wise mean of its impressions."""
    if not batches:
        raise InputError("no impression batches")
    dims = {b.features.shape[1] for b in batches}
    if len(dims) != 1:
        raise InputError(f"impression batches differ in dimension: {sorted(dims)}")
    pts = np.array([b.features.mean(axis=0) for b in batches])
    meta = tuple((b.user, b.class_index, b.iteration) for b in batches)
    return PointSet(pts, meta)


def _assign(dist: np.ndarray, medoids: Sequence[int]) -> tuple[np.ndarray, float]:
    """Nearest-medoid labels (ties to the lowest medoid index) and total cost."""
    order = np.argsort(medoids, kind="stable")
    sorted_medoids = np.asarray(medoids)[order]
    d = dist[:, sorted_medoids]
    nearest = np.argmin(d, axis=1)
    return order[nearest], float(d[np.arange(len(d)), nearest].sum())


def _canonical(medoids: Sequence[int], dist: np.ndarray) -> ClusterAssignment:
    medoids = tuple(sorted(int(m) for m in medoids))
    labels, cost = _assign(dist, medoids)
    return ClusterAssignment(len(medoids), medoids, labels, cost)


def kmedoids(points, k: int, seed: int = 0, *, return_history: bool = False):
    """PAM-style k-medoids on Euclidean distance.

    Greedy build (each new medoid is the point that lowers the total cost
    most; ties broken by a seeded random order) followed by best-improvement
    swaps until no (medoid, non-medoid) exchange lowers the cost. Cluster
    ids follow the ascending order of the medoid row indices.
    """
    X = _coords(points)
    n = len(X)
    if not 1 <= k <= n:
        raise InputError(f"k={k} must lie in 1..{n}")
    dist = cdist(X, X)
    rng = np.random.default_rng(seed)
    priority = rng.permutation(n)

    medoids: list[int] = []
    nearest = np.full(n, np.inf)
    for _ in range(k):
        best, best_cost = None, np.inf
        for c in priority:
            if c in medoids:
                continue
            cost = np.minimum(nearest, dist[:, c]).sum()
            if cost < best_cost - 1e-12 * max(1.0, abs(best_cost)) or best is None:
                best, best_cost = int(c), cost
        medoids.append(best)
        nearest = np.minimum(nearest, dist[:, best])

    _, cost = _assign(dist, medoids)
    history = [cost]
    while True:
        best_swap, best_cost = None, cost
        for i in range(k):
            for c in priority:
                if c in medoids:
                    continue
                trial = medoids.copy()
                trial[i] = int(c)
                trial_cost = dist[:, trial].min(axis=1).sum()
                if trial_cost < best_cost - 1e-12 * max(1.0, cost):
                    best_swap, best_cost = trial, trial_cost
        if best_swap is None:
            break
        medoids = best_swap
        _, cost = _assign(dist, medoids)
        history.append(cost)
    result = _canonical(medoids, dist)
    return (result, history) if return_history else result


def silhouette_score(points, assignment: ClusterAssignment | Sequence[int]) -> float:
    """Mean silhouette ``(b - a) / max(a, b)`` over all points.

    Members of singleton clusters score 0, as does any point with
    ``a == b == 0``.
    """
    X = _coords(points)
    labels = np.asarray(assignment.labels if isinstance(assignment, ClusterAssignment) else assignment)
    if len(labels) != len(X):
        raise InputError(f"{len(labels)} labels for {len(X)} points")
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise InputError("silhouette needs at least two non-empty clusters")
    dist = cdist(X, X)
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == c].mean() for c in clusters if c != labels[i])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(s.mean())


def _medoid_gap(points: np.ndarray, a: ClusterAssignment) -> float:
    m = points[list(a.medoid_indices)]
    d = cdist(m, m)
    return float(d[np.triu_indices(len(m), 1)].min())


def select_num_clusters(
    points,
    k_max: int,
    *,
    seed: int = 0,
    oracle_k: int | None = None,
    min_separation: float | None = None,
) -> ClusterSelection:
    """Choose the number of clusters and cluster the points.

    With ``oracle_k`` the count is taken as given. Otherwise every ``k`` in
    ``2..k_max`` is fitted and the best silhouette wins (ties go to the
    smaller ``k``). Silhouette cannot score a single cluster, so with
    ``min_separation`` a fit only counts if all of its medoids are at least
    that far apart; when no ``k >= 2`` qualifies the one-cluster solution is
    returned and flagged as low confidence.
    """
    X = _coords(points)
    n = len(X)
    if oracle_k is not None:
        a = kmedoids(X, oracle_k, seed)
        score = silhouette_score(X, a) if len(np.unique(a.labels)) >= 2 else None
        return ClusterSelection(oracle_k, a, score)
    if k_max > n:
        raise InputError(f"k_max={k_max} exceeds the {n} points")
    trivial = kmedoids(X, 1, seed)
    if n == 1 or k_max <= 1:
        return ClusterSelection(1, trivial, None)

    scores, fits = {}, {}
    for k in range(2, k_max + 1):
        a = kmedoids(X, k, seed)
        fits[k] = a
        scores[k] = silhouette_score(X, a)
    valid = [k for k in scores if min_separation is None or _medoid_gap(X, fits[k]) >= min_separation]
    if not valid:
        return ClusterSelection(1, trivial, None, low_confidence=True, scores=scores)
    best = max(valid, key=lambda k: (scores[k], -k))
    return ClusterSelection(best, fits[best], scores[best], scores=scores)


def _power_iteration(A: np.ndarray, basis: list[np.ndarray], rng, tol: float, max_iter: int):
    v = rng.standard_normal(A.shape[0])
    for u in basis:
        v -= (u @ v) * u
    v /= np.linalg.norm(v)
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_iter):
        w = A @ v
        for u in basis:
            w -= (u @ w) * u
        norm = np.linalg.norm(w)
        if norm <= 1e-14 * scale:
            return 0.0, v
        w /= norm
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return float(v @ A @ v), v


def pca_project(points, dims: int = 2, *, tol: float = 1e-10, max_iter: int = 100_000, seed: int = 0) -> PCAProjection:
    """Project onto the top ``dims`` covariance eigenvectors.

    Eigenpairs come from power iteration with deflation; every iterate is
    kept orthogonal to the axes already found.
    """
    X = _coords(points)
    n, d = X.shape
    if n < 2:
        raise InputError("PCA needs at least two points")
    if not 1 <= dims <= d:
        raise InputError(f"dims must lie in 1..{d}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    rng = np.random.default_rng(seed)
    axes, variances = [], []
    A = cov.copy()
    for _ in range(dims):
        lam, v = _power_iteration(A, axes, rng, tol, max_iter)
        lam = max(lam, 0.0)
        axes.append(v)
        variances.append(lam)
        A = A - lam * np.outer(v, v)
    axes_arr = np.array(axes)
    coords = Xc @ axes_arr.T
    if np.allclose(Xc, 0):
        coords = np.zeros((n, dims))
    return PCAProjection(coords, tuple(variances), axes_arr, mean)
