"""Feature corpora, per-round private partitions and the public dataset."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError, ParseError
from .impressions import DataImpressionBatch
from .scenario import Architecture, ScenarioConfig

ORIGINAL = "original"
IMPRESSION = "impression"

# stream tags for derive_seed
_PARTITION, _INJECT, _CORPUS = 11, 12, 13


def derive_seed(master: int, *keys: int) -> int:
    """Independent 32-bit seed for a (master, key...) tuple.

    Trailing zero keys are padding to ``SeedSequence``, so ``(m, a)`` and
    ``(m, a, 0)`` give the same seed; use non-zero tags to branch a stream.
    """
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


class LabelRegistry:
    """Bidirectional id <-> name map; ids are never reused."""

    def __init__(self, names: Sequence[str] = ()):
        self._names: dict[int, str] = {}
        for name in names:
            self.mint(name)

    def mint(self, name: str) -> int:
        if name in self._names.values():
            raise ConfigurationError(f"label name {name!r} already registered")
        new_id = max(self._names, default=-1) + 1
        self._names[new_id] = name
        return new_id

    def add(self, label: int, name: str) -> None:
        if label in self._names or name in self._names.values():
            raise ConfigurationError(f"label {label} / {name!r} already registered")
        self._names[label] = name

    def name(self, label: int) -> str:
        return self._names[label]

    def id(self, name: str) -> int:
        for k, v in self._names.items():
            if v == name:
                return k
        raise KeyError(name)

    def __contains__(self, label: int) -> bool:
        return label in self._names

    def __len__(self) -> int:
        return len(self._names)

    def items(self):
        return sorted(self._names.items())


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.labels), -1)
        if len(self.features) != len(self.labels):
            raise InputError(f"{len(self.features)} feature rows for {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def label_set(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels))

    def counts(self) -> dict[int, int]:
        return {int(k): v for k, v in sorted(Counter(self.labels.tolist()).items())}

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index])

    def with_labels(self, labels: Sequence[int]) -> "Dataset":
        """Rows whose label is in ``labels``."""
        return self.subset(np.isin(self.labels, list(labels)))

    @staticmethod
    def concat(parts: Sequence["Dataset"], dim: int | None = None) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Dataset(np.empty((0, dim or 0)), np.empty(0, dtype=int))
        return Dataset(np.vstack([p.features for p in parts]), np.concatenate([p.labels for p in parts]))


@dataclass
class PublicDataset(Dataset):
    """Shared reference set; grows only by appending impressions."""

    provenance: np.ndarray | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.provenance is None:
            self.provenance = np.full(len(self.labels), ORIGINAL, dtype=object)
        self.provenance = np.asarray(self.provenance, dtype=object)
        if len(self.provenance) != len(self.labels):
            raise InputError("one provenance tag per sample required")

    @property
    def original_count(self) -> int:
        return int(np.sum(self.provenance == ORIGINAL))


@dataclass
class RoundAssignment:
    """Private data of every user for one iteration.

    ``indices[m]`` are rows of the source corpus; ``new_labels[m]`` lists the
    labels injected into user ``m + 1`` that it did not already hold.
    """

    iteration: int
    datasets: list[Dataset]
    indices: list[np.ndarray]
    label_sets: list[tuple[int, ...]]
    architectures: list[Architecture]
    new_labels: list[tuple[int, ...]]
    # undrawn source rows per label, so injections stay disjoint from the round's draws
    remaining: dict[int, list[int]] | None = field(default=None, repr=False, compare=False)


def generate_synthetic_dataset(
    num_classes: int,
    frames_per_class: int,
    feature_dim: int,
    separation: float,
    seed: int = 0,
    spread: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian class clusters whose means are exactly ``separation`` apart.

    The means are scaled columns of a random orthonormal basis, so the
    construction needs ``feature_dim >= num_classes``.
    """
    if num_classes < 1 or frames_per_class < 1 or feature_dim < 1:
        raise ConfigurationError("class count, frames and feature_dim must be positive")
    if separation <= 0 or spread <= 0:
        raise ConfigurationError("separation and spread must be positive")
    if feature_dim < num_classes:
        raise ConfigurationError(
            f"feature_dim={feature_dim} cannot hold {num_classes} means at pairwise distance {separation}"
        )
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((feature_dim, num_classes)))
    q = q * np.sign(np.diag(r))
    means = (separation / np.sqrt(2.0)) * q.T
    labels = np.repeat(np.arange(num_classes), frames_per_class)
    features = means[labels] + spread * rng.standard_normal((len(labels), feature_dim))
    return Dataset(features, labels)


def save_feature_file(path: str | Path, data: Dataset, comments: Sequence[str] = ()) -> None:
    """Write ``N d`` header then one ``x_1 ... x_d label`` row per sample."""
    lines = [f"# {c}" for c in comments]
    lines.append(f"{len(data)} {data.dim}")
    for x, y in zip(data.features, data.labels):
        lines.append(" ".join(repr(float(v)) for v in x) + f" {int(y)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_feature_file(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read feature file: {exc.strerror}", path=str(path)) from None
    header = None
    rows, labels = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if header is None:
            try:
                n, d = (int(t) for t in tokens)
            except ValueError:
                raise ParseError(f"header must be 'N d', got {line!r}", lineno, str(path)) from None
            if n < 0 or d < 1:
                raise ParseError(f"invalid header sizes N={n} d={d}", lineno, str(path))
            header = (n, d, lineno)
            continue
        n, d, _ = header
        if len(tokens) != d + 1:
            raise ParseError(f"row {len(rows) + 1} has {len(tokens)} fields, expected {d + 1}", lineno, str(path))
        try:
            x = [float(t) for t in tokens[:d]]
            y = int(tokens[d])
        except ValueError:
            raise ParseError(f"row {len(rows) + 1} has a non-numeric token", lineno, str(path)) from None
        if y < 0:
            raise ParseError(f"row {len(rows) + 1} has a negative label id", lineno, str(path))
        rows.append(x)
        labels.append(y)
    if header is None:
        raise ParseError("missing 'N d' header", None, str(path))
    n, d, hline = header
    if len(rows) != n:
        raise ParseError(f"header declares {n} rows, file has {len(rows)}", hline, str(path))
    return Dataset(np.array(rows, dtype=float).reshape(n, d), np.array(labels, dtype=int))


def build_corpus(scenario: ScenarioConfig) -> tuple[PublicDataset, Dataset]:
    """Public dataset D0 and the disjoint pool private rounds sample from.

    The first ``public_frames_per_label`` rows of each public label go to
    D0; everything else (including all rows of not-yet-public labels) forms
    the pool.
    """
    c = scenario.corpus
    if c.file is not None:
        source = load_feature_file(c.file)
    else:
        source = generate_synthetic_dataset(
            len(scenario.label_names),
            c.public_frames_per_label + c.pool_frames_per_label,
            c.feature_dim,
            c.separation,
            seed=derive_seed(scenario.master_seed, _CORPUS),
            spread=c.spread,
        )
    if source.dim != c.feature_dim:
        raise ConfigurationError(f"corpus has dimension {source.dim}, scenario says {c.feature_dim}")
    public_mask = np.zeros(len(source), dtype=bool)
    for lab in scenario.public_labels:
        rows = np.flatnonzero(source.labels == lab)
        if len(rows) < c.public_frames_per_label:
            raise ConfigurationError(f"label {scenario.label_names[lab]!r} has only {len(rows)} frames")
        public_mask[rows[: c.public_frames_per_label]] = True
    pub = source.subset(public_mask)
    return PublicDataset(pub.features, pub.labels), source.subset(~public_mask)


def _draw(rng, available: dict[int, list[int]], source: Dataset, label: int, count: int, name: str) -> np.ndarray:
    pool = available.setdefault(label, list(rng.permutation(np.flatnonzero(source.labels == label))))
    if count > len(pool):
        raise ConfigurationError(
            f"insufficient source samples for label {name!r}: need {count}, {len(pool)} left this round"
        )
    picked, available[label] = pool[:count], pool[count:]
    return np.array(picked, dtype=int)


def partition_round(
    scenario: ScenarioConfig,
    source: Dataset,
    iteration: int,
    label_sets: Sequence[Sequence[int]] | None = None,
) -> RoundAssignment:
    """Sample every user's private data for ``iteration``.

    Each user gets a count drawn uniformly from ``frames_per_label``
    (inclusive) for every label it holds; rows are drawn without
    replacement across all users of the round. ``label_sets`` overrides the
    scenario's initial per-user labels (e.g. after new classes resolve).
    """
    if not 1 <= iteration <= scenario.num_iterations:
        raise ConfigurationError(f"iteration {iteration} outside 1..{scenario.num_iterations}")
    label_sets = [tuple(sorted(s)) for s in (label_sets or scenario.user_labels)]
    if len(label_sets) != scenario.num_users:
        raise ConfigurationError(f"{len(label_sets)} label sets for {scenario.num_users} users")
    rng = np.random.default_rng(derive_seed(scenario.master_seed, _PARTITION, iteration))
    lo, hi = scenario.frames_per_label
    available: dict[int, list[int]] = {}
    datasets, indices, archs = [], [], []
    for m, labels in enumerate(label_sets, start=1):
        parts = []
        for lab in labels:
            count = int(rng.integers(lo, hi + 1))
            parts.append(_draw(rng, available, source, lab, count, scenario.label_names[lab]))
        idx = np.concatenate(parts) if parts else np.empty(0, dtype=int)
        indices.append(idx)
        datasets.append(source.subset(idx))
        archs.append(scenario.architecture(m, iteration))
    return RoundAssignment(iteration, datasets, indices, label_sets, archs, [() for _ in label_sets], available)


def apply_injection(
    assignment: RoundAssignment, scenario: ScenarioConfig, source: Dataset, iteration: int | None = None
) -> RoundAssignment:
    """Append the scheduled new-class samples for the assignment's iteration."""
    iteration = assignment.iteration if iteration is None else iteration
    entries = scenario.injections_at(iteration)
    if not entries:
        return assignment
    public = set(scenario.public_labels)
    available = {k: list(v) for k, v in (assignment.remaining or {}).items()}
    if assignment.remaining is None:
        used = np.concatenate(assignment.indices) if assignment.indices else np.empty(0, dtype=int)
        available = {}
        rng0 = np.random.default_rng(derive_seed(scenario.master_seed, _INJECT, iteration, 1))
        for lab in {e.label for e in entries}:
            rows = np.setdiff1d(np.flatnonzero(source.labels == lab), used)
            available[lab] = list(rng0.permutation(rows))
    rng = np.random.default_rng(derive_seed(scenario.master_seed, _INJECT, iteration))
    datasets = list(assignment.datasets)
    indices = list(assignment.indices)
    new_labels = [list(n) for n in assignment.new_labels]
    for inj in entries:
        if not 1 <= inj.user <= len(datasets):
            raise ConfigurationError(f"injection for unknown user {inj.user}")
        if inj.label in public:
            raise ConfigurationError(
                f"injected label {scenario.label_names[inj.label]!r} is already in the public label set"
            )
        m = inj.user - 1
        idx = _draw(rng, available, source, inj.label, inj.count, scenario.label_names[inj.label])
        indices[m] = np.concatenate([indices[m], idx])
        datasets[m] = source.subset(indices[m])
        if inj.label not in assignment.label_sets[m] and inj.label not in new_labels[m]:
            new_labels[m].append(inj.label)
    return RoundAssignment(
        assignment.iteration, datasets, indices, list(assignment.label_sets),
        list(assignment.architectures), [tuple(n) for n in new_labels], available,
    )


def augment_public(
    public: PublicDataset,
    impressions: Sequence[DataImpressionBatch | np.ndarray],
    new_labels: Sequence[int],
) -> PublicDataset:
    """Append impression rows under freshly minted labels; returns a new dataset."""
    if len(impressions) != len(new_labels):
        raise InputError(f"{len(impressions)} impression batches for {len(new_labels)} labels")
    if not impressions:
        return public
    existing = set(public.label_set)
    if len(set(new_labels)) != len(new_labels):
        raise ConfigurationError(f"duplicate new labels {list(new_labels)}")
    for lab in new_labels:
        if lab in existing:
            raise ConfigurationError(f"label {lab} collides with the public label set")
    feats, labs, prov = [public.features], [public.labels], [public.provenance]
    for batch, lab in zip(impressions, new_labels):
        x = batch.features if isinstance(batch, DataImpressionBatch) else np.asarray(batch, dtype=float)
        if x.ndim != 2 or x.shape[1] != public.dim:
            raise InputError(f"impressions of shape {x.shape} do not match public dimension {public.dim}")
        feats.append(x)
        labs.append(np.full(len(x), lab, dtype=int))
        prov.append(np.full(len(x), IMPRESSION, dtype=object))
    return PublicDataset(np.vstack(feats), np.concatenate(labs), np.concatenate(prov))
