"""Small dense softmax classifiers in plain numpy.

Only what the federation protocol needs: seeded construction, mini-batch
training on cross-entropy, softmax scoring, last-layer weight extraction
and the gradient of the cross-entropy with respect to the input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError, LabelError

ACTIVATIONS = ("relu", "softmax", "identity")
SIMPLEX_ATOL = 1e-6


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable for large logits."""
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a dense classifier.

    An empty ``hidden_layer_widths`` gives a multinomial logistic model.
    ``hidden_activation="softmax"`` normalizes each hidden layer with an
    exponential, which is how the "Softmax Activation" architectures are
    represented here.
    """

    input_dim: int
    num_classes: int
    hidden_layer_widths: tuple[int, ...] = ()
    hidden_activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_widths", tuple(int(w) for w in self.hidden_layer_widths))
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        if any(w < 1 for w in self.hidden_layer_widths):
            raise ConfigurationError(f"hidden widths must be positive, got {self.hidden_layer_widths}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"unknown activation {self.hidden_activation!r}, expected one of {ACTIVATIONS}"
            )
        if self.init_seed < 0:
            raise ConfigurationError("init_seed must be unsigned")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layer_widths, self.num_classes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.seed < 0:
            raise ConfigurationError("seed must be unsigned")


@dataclass
class ScoreTable:
    """Softmax outputs of a model (or merged scores) over a set of samples.

    ``values[n, j]`` is the score of sample ``n`` for label ``label_ids[j]``.
    """

    values: np.ndarray
    label_ids: tuple[int, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.label_ids = tuple(int(c) for c in self.label_ids)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.label_ids):
            raise InputError(
                f"score matrix shape {self.values.shape} does not match {len(self.label_ids)} labels"
            )
        if len(set(self.label_ids)) != len(self.label_ids):
            raise InputError("duplicate label ids in score table")

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    def column(self, label: int) -> np.ndarray:
        try:
            return self.values[:, self.label_ids.index(label)]
        except ValueError:
            raise LabelError(f"label {label} not in score table columns {self.label_ids}") from None

    def restrict(self, labels: Sequence[int]) -> "ScoreTable":
        """Columns for ``labels``, in that order."""
        idx = []
        for c in labels:
            if c not in self.label_ids:
                raise LabelError(f"label {c} not in score table columns {self.label_ids}")
            idx.append(self.label_ids.index(c))
        return ScoreTable(self.values[:, idx].copy(), tuple(labels))

    def predictions(self) -> np.ndarray:
        """Argmax label per row; ties go to the lowest label id."""
        order = np.argsort(self.label_ids, kind="stable")
        ids = np.asarray(self.label_ids)[order]
        return ids[np.argmax(self.values[:, order], axis=1)]


@dataclass
class Classifier:
    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    label_ids: tuple[int, ...]

    def copy(self) -> "Classifier":
        return Classifier(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            tuple(self.label_ids),
        )

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


@dataclass
class LastLayerWeights:
    """Weights into the class nodes; column ``i`` belongs to ``label_ids[i]``."""

    matrix: np.ndarray
    label_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise InputError(f"last-layer matrix must be h x K with K >= 1, got {self.matrix.shape}")
        if not self.label_ids:
            self.label_ids = tuple(range(self.matrix.shape[1]))
        self.label_ids = tuple(int(c) for c in self.label_ids)
        if len(self.label_ids) != self.matrix.shape[1]:
            raise InputError("one label id per column required")


def build_classifier(spec: ModelSpec, label_ids: Sequence[int]) -> Classifier:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    label_ids = tuple(int(c) for c in label_ids)
    if len(label_ids) != spec.num_classes:
        raise ConfigurationError(
            f"{len(label_ids)} label ids given for a {spec.num_classes}-class model"
        )
    if len(set(label_ids)) != len(label_ids):
        raise ConfigurationError("label ids must be distinct")
    rng = np.random.default_rng(spec.init_seed)
    weights, biases = [], []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Classifier(spec, weights, biases, label_ids)


def linear_head(weights: LastLayerWeights) -> Classifier:
    """Bias-free linear softmax model ``x -> softmax(W^T x)`` over the columns of ``weights``."""
    h, k = weights.matrix.shape
    spec = ModelSpec(input_dim=h, num_classes=k)
    return Classifier(spec, [weights.matrix.copy()], [np.zeros(k)], weights.label_ids)


def _as_batch(model: Classifier, features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.spec.input_dim:
        raise InputError(
            f"expected features of dimension {model.spec.input_dim}, got shape {np.shape(features)}"
        )
    return X


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "softmax":
        # scaled by the layer width so activations average 1, otherwise depth kills the signal
        return a.shape[-1] * softmax(a)
    return a


def _activate_backward(grad: np.ndarray, a: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return grad * (a > 0)
    if kind == "softmax":
        s = h / h.shape[-1]
        return h * (grad - (grad * s).sum(axis=1, keepdims=True))
    return grad


def _forward_cache(model: Classifier, X: np.ndarray):
    """Return (layer inputs, pre-activations, logits)."""
    kind = model.spec.hidden_activation
    inputs, pre = [], []
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        a = h @ W + b
        if i == last:
            return inputs, pre, a
        pre.append(a)
        h = _activate(a, kind)
    raise AssertionError("unreachable")


def _backward(model: Classifier, inputs, pre, grad_logits: np.ndarray):
    """Backpropagate dL/dlogits; return (weight grads, bias grads, input grad)."""
    kind = model.spec.hidden_activation
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    g = grad_logits
    for i in range(len(model.weights) - 1, -1, -1):
        gW[i] = inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ model.weights[i].T
        if i > 0:
            g = _activate_backward(g, pre[i - 1], inputs[i], kind)
    return gW, gb, g


def logits(model: Classifier, features) -> np.ndarray:
    return _forward_cache(model, _as_batch(model, features))[2]


def forward(model: Classifier, features) -> ScoreTable:
    """Softmax scores of ``model`` for a batch of feature vectors."""
    return ScoreTable(softmax(logits(model, features)), model.label_ids)


def _label_indices(model: Classifier, labels) -> np.ndarray:
    lookup = {c: j for j, c in enumerate(model.label_ids)}
    try:
        return np.array([lookup[int(y)] for y in labels], dtype=int)
    except KeyError as exc:
        raise LabelError(f"label {exc.args[0]} is not one of the model labels {model.label_ids}") from None


def cross_entropy(model: Classifier, features, labels) -> float:
    """Mean cross-entropy of hard labels."""
    X = _as_batch(model, features)
    idx = _label_indices(model, labels)
    logp = _log_softmax(logits(model, X))
    return float(-logp[np.arange(len(idx)), idx].mean())


def train(model: Classifier, features, labels, cfg: TrainConfig) -> Classifier:
    """Plain mini-batch gradient descent on mean cross-entropy; returns a new model."""
    X = _as_batch(model, features)
    labels = np.asarray(labels)
    if len(X) == 0:
        raise InputError("cannot train on an empty dataset")
    if len(labels) != len(X):
        raise InputError(f"{len(labels)} labels for {len(X)} samples")
    idx = _label_indices(model, labels)
    onehot = np.eye(model.num_classes)[idx]

    out = model.copy()
    if cfg.learning_rate == 0:
        return out
    rng = np.random.default_rng(cfg.seed)
    n = len(X)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            inputs, pre, z = _forward_cache(out, X[batch])
            grad_z = (softmax(z) - onehot[batch]) / len(batch)
            gW, gb, _ = _backward(out, inputs, pre, grad_z)
            for i in range(len(out.weights)):
                out.weights[i] -= cfg.learning_rate * gW[i]
                out.biases[i] -= cfg.learning_rate * gb[i]
    return out


def check_simplex(y: np.ndarray, atol: float = SIMPLEX_ATOL) -> None:
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)) or np.any(y < -atol) or np.any(np.abs(y.sum(axis=-1) - 1.0) > atol):
        raise InputError("target is not on the probability simplex")


def soft_cross_entropy_and_input_grad(model: Classifier, X: np.ndarray, Y: np.ndarray):
    """Per-row loss ``-sum_j y_j log p_j(x)`` and its gradient with respect to each row of X."""
    inputs, pre, z = _forward_cache(model, X)
    logp = _log_softmax(z)
    with np.errstate(invalid="ignore"):
        loss = -(Y * np.where(Y > 0, logp, 0.0)).sum(axis=1)
    grad_z = np.exp(logp) * Y.sum(axis=1, keepdims=True) - Y
    _, _, gx = _backward(model, inputs, pre, grad_z)
    return loss, gx


def input_gradient(model: Classifier, x, y_target) -> np.ndarray:
    """Gradient of the cross-entropy between ``y_target`` and ``model(x)`` w.r.t. ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("input_gradient takes a single feature vector")
    X = _as_batch(model, x)
    if not np.all(np.isfinite(X)):
        raise InputError("x must be finite")
    y = np.asarray(y_target, dtype=float)
    if y.shape != (model.num_classes,):
        raise InputError(f"target must have {model.num_classes} entries, got shape {y.shape}")
    check_simplex(y)
    _, gx = soft_cross_entropy_and_input_grad(model, X, y[None, :])
    return gx[0]


def last_layer_weights(model: Classifier) -> LastLayerWeights:
    return LastLayerWeights(model.weights[-1].copy(), model.label_ids)


def accuracy(source: Classifier | ScoreTable, labels, features=None) -> float:
    """Fraction of samples whose argmax label equals the true label.

    ``source`` is either a score table whose rows align with ``labels`` or a
    classifier, in which case ``features`` must be given.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InputError("accuracy of an empty dataset is undefined")
    if isinstance(source, Classifier):
        if features is None:
            raise InputError("features are required to score a classifier")
        source = forward(source, features)
    if source.num_rows != len(labels):
        raise InputError(f"{source.num_rows} score rows for {len(labels)} labels")
    return float(np.mean(source.predictions() == labels))


def save_classifier(model: Classifier, path: str | Path) -> None:
    """Write a model dump (numpy ``.npz``)."""
    s = model.spec
    meta = {
        "input_dim": s.input_dim,
        "num_classes": s.num_classes,
        "hidden_layer_widths": list(s.hidden_layer_widths),
        "hidden_activation": s.hidden_activation,
        "init_seed": s.init_seed,
        "label_ids": list(model.label_ids),
    }
    arrays = {f"W{i}": w for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_classifier(path: str | Path) -> Classifier:
    with np.load(path, allow_pickle=False) as z:
        try:
            meta = json.loads(str(z["meta"]))
            spec = ModelSpec(
                input_dim=meta["input_dim"],
                num_classes=meta["num_classes"],
                hidden_layer_widths=tuple(meta["hidden_layer_widths"]),
                hidden_activation=meta["hidden_activation"],
                init_seed=meta["init_seed"],
            )
            n = len(spec.layer_sizes) - 1
            weights = [z[f"W{i}"].astype(float) for i in range(n)]
            biases = [z[f"b{i}"].astype(float) for i in range(n)]
        except KeyError as exc:
            raise ConfigurationError(f"model dump {path} is missing {exc}") from None
    for i, (fi, fo) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        if weights[i].shape != (fi, fo) or biases[i].shape != (fo,):
            raise ConfigurationError(f"layer {i} of {path} has inconsistent shape")
    return Classifier(spec, weights, biases, tuple(meta["label_ids"]))
