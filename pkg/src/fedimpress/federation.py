"""Federated rounds with zero-shot handling of newly announced classes.

Each iteration every user builds a local model on its private data. Users
without unseen classes (or in silent mode) exchange softmax score tables
over the public dataset (alpha-weighted local update, label-wise
accuracy-weighted global merge). Users that report unseen classes train a
linear model on the public data plus their new samples and send only its
last-layer weights; the server turns those into data impressions,
clusters them to decide which announcements are the same class, mints or
re-identifies labels and grows the public dataset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import clustering
from .data import (
    IMPRESSION,
    Dataset,
    LabelRegistry,
    PublicDataset,
    apply_injection,
    augment_public,
    build_corpus,
    derive_seed,
    partition_round,
)
from .errors import ConfigurationError, InputError, LabelError, SynthesisDivergenceError
from .impressions import DataImpressionBatch, SynthesisConfig, average_impressions, impressions_for_class
from .nn import (
    LastLayerWeights,
    ModelSpec,
    ScoreTable,
    TrainConfig,
    accuracy,
    build_classifier,
    forward,
    last_layer_weights,
    linear_head,
    train,
)
from .scenario import Architecture, ClusteringConfig, ScenarioConfig

log = logging.getLogger(__name__)

GLOBAL = "GLOBAL"
_INIT, _TRAIN, _SYNTH, _CLUSTER = 21, 22, 23, 24


@dataclass
class GlobalState:
    """Server scores over the current public dataset; columns are the label set Y."""

    scores: ScoreTable
    public: PublicDataset
    iteration: int = 0

    @property
    def labels(self) -> tuple[int, ...]:
        return self.scores.label_ids

    @classmethod
    def initial(cls, public: PublicDataset) -> "GlobalState":
        labels = public.label_set
        return cls(ScoreTable(np.zeros((len(public), len(labels))), labels), public)


@dataclass
class ClientRoundOutput:
    user: int
    accuracy: float
    alpha: float
    scores: ScoreTable | None = None
    weights: LastLayerWeights | None = None
    new_slots: int = 0
    skipped: bool = False
    note: str = ""
    # client-private: which of its own classes each announced slot is
    slot_sources: tuple[int, ...] = ()

    @property
    def reports_new_classes(self) -> bool:
        return self.weights is not None


@dataclass
class MetricsRecord:
    iteration: int
    entity: str
    phase: str
    accuracy: float
    label_count: int
    public_size: int
    new_labels_resolved: int


@dataclass
class ClusterPoint:
    user: str
    slot: int
    pc1: float
    pc2: float
    cluster_id: int


@dataclass
class ResolutionReport:
    iteration: int
    mapping: dict[tuple[int, int], int] = field(default_factory=dict)
    minted: list[int] = field(default_factory=list)
    reused: list[int] = field(default_factory=list)
    k: int = 0
    silhouette: float | None = None
    low_confidence: bool = False
    points: list[ClusterPoint] = field(default_factory=list)
    deferred: list[tuple[int, int]] = field(default_factory=list)
    # simulation diagnostics only: true class behind each announced slot
    slot_truth: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def resolved_labels(self) -> list[int]:
        return sorted(set(self.mapping.values()))


@dataclass
class Client:
    """One participant. ``aliases`` maps the client's own class ids to global label ids."""

    user: int
    aliases: dict[int, int]
    pending: dict[int, Dataset] = field(default_factory=dict)

    @property
    def label_set(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.aliases.values())))

    @property
    def known_sources(self) -> tuple[int, ...]:
        return tuple(sorted(self.aliases))


def compute_alpha(private_size: int, public_size: int) -> float:
    """Weight of a fresh local model relative to the global scores."""
    if public_size <= 0:
        raise ConfigurationError("public dataset is empty")
    if private_size <= 0:
        raise InputError("private dataset is empty")
    return private_size / public_size


def local_update_choice1(global_scores: ScoreTable, local_scores: ScoreTable, alpha: float,
                         normalize: bool = True) -> ScoreTable:
    """``global + alpha * local`` on the user's label columns, rows renormalized."""
    if tuple(global_scores.label_ids) != tuple(local_scores.label_ids):
        raise LabelError(
            f"global columns {global_scores.label_ids} do not match local columns {local_scores.label_ids}"
        )
    if global_scores.values.shape != local_scores.values.shape:
        raise InputError("global and local score tables differ in shape")
    values = global_scores.values + alpha * local_scores.values
    if normalize:
        total = values.sum(axis=1, keepdims=True)
        values = np.divide(values, total, out=np.zeros_like(values), where=total > 0)
    return ScoreTable(values, local_scores.label_ids)


def _local_accuracy(scores: ScoreTable, public: PublicDataset) -> float:
    rows = np.isin(public.labels, scores.label_ids)
    if not rows.any():
        return float("nan")
    return accuracy(ScoreTable(scores.values[rows], scores.label_ids), public.labels[rows])


def local_round(
    client: Client,
    data: Dataset,
    public: PublicDataset,
    state: GlobalState,
    *,
    reporting: bool,
    architecture: Architecture = Architecture(),
    train_cfg: TrainConfig = TrainConfig(),
    choice2_cfg: TrainConfig | None = None,
    init_seed: int = 0,
) -> ClientRoundOutput:
    """Build, predict on the public set and produce this client's update.

    Samples of classes the client cannot name yet are dropped unless the
    client reports them, in which case it trains a linear model on the
    public rows of its labels plus all private data (new classes as extra
    output slots) and returns that model's last-layer weights.
    """
    known = np.isin(data.labels, client.known_sources)
    unknown_sources = sorted(set(data.labels[~known].tolist()) | set(client.pending))
    l_m = client.label_set
    mapped = np.array([client.aliases.get(int(s), -1) for s in data.labels[known]], dtype=int)
    known_data = Dataset(data.features[known], mapped)

    if reporting and unknown_sources:
        slots = {src: -(j + 1) for j, src in enumerate(unknown_sources)}
        fresh = data.subset(~known)
        new_data = Dataset.concat([fresh, *client.pending.values()], public.dim)
        new_data = Dataset(new_data.features, np.array([slots[int(s)] for s in new_data.labels], dtype=int))
        train_set = Dataset.concat([public.with_labels(l_m), known_data, new_data], public.dim)
        label_ids = (*l_m, *slots.values())
        spec = ModelSpec(public.dim, len(label_ids), (), "identity", init_seed)
        model = train(build_classifier(spec, label_ids), train_set.features, train_set.labels,
                      replace(choice2_cfg or train_cfg, seed=init_seed))
        acc = float("nan")
        if l_m:
            acc = _local_accuracy(forward(model, public.features).restrict(l_m), public)
        # kept until the server maps the slots to labels
        for src in unknown_sources:
            parts = [p for p in (fresh.subset(fresh.labels == src), client.pending.get(src)) if p is not None]
            client.pending[src] = Dataset.concat(parts, public.dim)
        return ClientRoundOutput(
            client.user, acc, compute_alpha(len(known_data) + len(new_data), len(public)),
            weights=last_layer_weights(model), new_slots=len(slots), slot_sources=tuple(unknown_sources),
        )

    if len(known_data) == 0 or not l_m:
        return ClientRoundOutput(client.user, float("nan"), 1.0, skipped=True, note="no usable training data")
    spec = ModelSpec(public.dim, len(l_m), architecture.hidden, architecture.activation, init_seed)
    model = train(build_classifier(spec, l_m), known_data.features, known_data.labels,
                  replace(train_cfg, seed=init_seed))
    local = forward(model, public.features)
    alpha = compute_alpha(len(known_data), len(public))
    g = state.scores.restrict(l_m)
    updated = local_update_choice1(g, local, alpha)
    return ClientRoundOutput(client.user, _local_accuracy(updated, public), alpha, scores=updated)


def global_update_choice1(outputs: Sequence[ClientRoundOutput], state: GlobalState) -> GlobalState:
    """Label-wise merge of score tables.

    A label held by one user is copied; a label held by several is their
    accuracy-weighted mean. Labels nobody sent keep their previous scores.
    Score tables may cover only a prefix of the public rows (rows appended
    by the same round's impressions keep their previous values).
    """
    senders = [o for o in outputs if o.scores is not None]
    values = state.scores.values.copy()
    for j, label in enumerate(state.labels):
        holders = [o for o in senders if label in o.scores.label_ids]
        if not holders:
            continue
        cols = np.array([o.scores.column(label) for o in holders])
        n = cols.shape[1]
        if n > len(values):
            raise InputError("score table has more rows than the public dataset")
        if len(holders) == 1:
            values[:n, j] = cols[0]
            continue
        beta = np.array([o.accuracy for o in holders], dtype=float)
        beta = np.where(np.isfinite(beta), beta, 0.0)
        if beta.sum() <= 0:
            beta = np.ones(len(holders))
        values[:n, j] = beta @ cols / beta.sum()
    return GlobalState(ScoreTable(values, state.labels), state.public, state.iteration)


def impression_labels(public: PublicDataset) -> list[int]:
    """Labels whose public rows are impressions (i.e. labels minted during the run)."""
    mask = public.provenance == IMPRESSION
    return sorted(set(public.labels[mask].tolist()))


def global_update_choice2(
    outputs: Sequence[ClientRoundOutput],
    state: GlobalState,
    registry: LabelRegistry,
    *,
    synthesis: SynthesisConfig = SynthesisConfig(),
    cluster_cfg: ClusteringConfig = ClusteringConfig(),
    iteration: int = 0,
    seed: int = 0,
    oracle_truth: Callable[[object], int] | None = None,
) -> tuple[GlobalState, ResolutionReport]:
    """Resolve announced classes into labels and grow the public dataset.

    For every announced slot the server rebuilds a bias-free linear head
    from the transmitted weights and synthesizes impressions. The batch
    means, together with the means of impressions already in the public
    set (one per previously minted label), are clustered. A cluster that
    contains an earlier label re-uses it; any other cluster mints a new
    label whose public rows are the element-wise mean of its members'
    impressions.

    ``oracle_truth`` (simulation only) maps a point key ``("slot", user,
    slot)`` or ``("label", id)`` to its true class; when given, the
    number of clusters is the number of distinct true classes.
    """
    report = ResolutionReport(iteration)
    announcing = [o for o in outputs if o.weights is not None and o.new_slots > 0]
    if not announcing:
        return state, report
    public = state.public

    batches: list[DataImpressionBatch] = []
    keys: list[tuple] = []
    for o in announcing:
        head = linear_head(o.weights)
        if head.spec.input_dim != public.dim:
            raise InputError(f"user {o.user} sent weights for dimension {head.spec.input_dim}, public is {public.dim}")
        first_slot = head.num_classes - o.new_slots
        for s in range(o.new_slots):
            cfg = replace(synthesis, seed=derive_seed(seed, _SYNTH, iteration, o.user, s))
            try:
                batch = impressions_for_class(head, first_slot + s, cfg, user=o.user, iteration=iteration)
            except SynthesisDivergenceError as exc:
                log.warning("iteration %d: user %d slot %d deferred: %s", iteration, o.user, s, exc)
                report.deferred.append((o.user, s))
                continue
            batches.append(batch)
            keys.append(("slot", o.user, s))
    if not batches:
        return state, report

    stored = impression_labels(public)
    samples = [b.features for b in batches]
    for lab in stored:
        samples.append(public.features[(public.labels == lab) & (public.provenance == IMPRESSION)])
        keys.append(("label", lab))
    # directions only: the scale of an impression follows the sender's weight norm
    reps = np.array([s.mean(axis=0) for s in samples])
    norms = np.linalg.norm(reps, axis=1, keepdims=True)
    reps = np.divide(reps, norms, out=np.zeros_like(reps), where=norms > 0)
    points = clustering.PointSet(reps, tuple(keys))

    cseed = derive_seed(seed, _CLUSTER, iteration)
    if oracle_truth is not None:
        k = len({oracle_truth(key) for key in keys})
        sel = clustering.select_num_clusters(points, k, seed=cseed, oracle_k=k)
    else:
        k_max = min(cluster_cfg.k_max, len(points))
        sel = clustering.select_num_clusters(points, k_max, seed=cseed, min_separation=cluster_cfg.min_separation)
    report.k, report.silhouette, report.low_confidence = sel.k, sel.silhouette, sel.low_confidence

    new_batches, new_ids = [], []
    cluster_label = {}
    for c in range(sel.k):
        members = sel.assignment.members(c)
        old = sorted(keys[i][1] for i in members if keys[i][0] == "label")
        slot_members = [i for i in members if keys[i][0] == "slot"]
        if old:
            cluster_label[c] = old[0]
            if slot_members:
                report.reused.append(old[0])
            continue
        lab = registry.mint(f"new@{iteration}.{c}")
        cluster_label[c] = lab
        report.minted.append(lab)
        new_batches.append(average_impressions([batches[i] for i in slot_members]))
        new_ids.append(lab)
    for i, key in enumerate(keys):
        if key[0] == "slot":
            report.mapping[(key[1], key[2])] = cluster_label[int(sel.assignment.labels[i])]

    if len(points) >= 2:
        proj = clustering.pca_project(points, 2).coords
    else:
        proj = np.zeros((1, 2))
    for i, key in enumerate(keys):
        who = f"user{key[1]}" if key[0] == "slot" else "public"
        slot = key[2] if key[0] == "slot" else key[1]
        report.points.append(ClusterPoint(who, slot, float(proj[i, 0]), float(proj[i, 1]),
                                          int(sel.assignment.labels[i])))

    new_public = augment_public(public, new_batches, new_ids)
    labels = (*state.labels, *new_ids)
    values = np.zeros((len(new_public), len(labels)))
    values[: state.scores.num_rows, : len(state.labels)] = state.scores.values
    return GlobalState(ScoreTable(values, labels), new_public, state.iteration), report


def global_accuracy(state: GlobalState) -> float:
    return accuracy(state.scores, state.public.labels)


def restricted_accuracy(state: GlobalState, labels: Sequence[int]) -> float:
    """Global scores judged only on ``labels`` (rows and columns), per-user view."""
    labels = [c for c in labels if c in state.labels]
    if not labels:
        return float("nan")
    return _local_accuracy(state.scores.restrict(labels), state.public)


@dataclass
class RunResult:
    scenario: ScenarioConfig
    metrics: list[MetricsRecord]
    state: GlobalState
    resolutions: list[ResolutionReport]
    user_global: dict[tuple[int, int], float]
    label_truth: dict[int, int]
    events: list[str]
    registry: LabelRegistry

    def rows(self, entity: str | None = None, phase: str | None = None) -> list[MetricsRecord]:
        return [r for r in self.metrics
                if (entity is None or r.entity == entity) and (phase is None or r.phase == phase)]

    def round_summary(self) -> list[tuple[int, float, float]]:
        """(iteration, mean local accuracy, mean global accuracy), both over users.

        Users without a finite value in either phase are left out of that
        round so the two means cover the same users.
        """
        out = []
        for i in range(1, self.scenario.num_iterations + 1):
            local = {r.entity: r.accuracy for r in self.metrics if r.iteration == i and r.phase == "local"}
            glob = {r.entity: r.accuracy for r in self.metrics
                    if r.iteration == i and r.phase == "global" and r.entity != GLOBAL}
            users = [u for u in local if np.isfinite(local[u]) and np.isfinite(glob.get(u, np.nan))]
            if not users:
                out.append((i, float("nan"), float("nan")))
                continue
            out.append((i, float(np.mean([local[u] for u in users])), float(np.mean([glob[u] for u in users]))))
        return out

    def overall_accuracy(self) -> list[tuple[int, float]]:
        """(iteration, accuracy of the merged scores on the whole public set)."""
        return [(r.iteration, r.accuracy) for r in self.metrics if r.entity == GLOBAL]

    @property
    def final_labels(self) -> tuple[int, ...]:
        return self.state.labels


def run(
    scenario: ScenarioConfig,
    *,
    oracle_k: bool | None = None,
    silent: bool | None = None,
    seed: int | None = None,
    progress: Callable[[int, list[MetricsRecord]], None] | None = None,
) -> RunResult:
    """Simulate every round of ``scenario``.

    ``oracle_k``, ``silent`` and ``seed`` override the scenario's
    clustering mode, reporting mode and master seed.
    """
    if seed is not None:
        scenario = scenario.replace(master_seed=seed)
    if silent is not None:
        scenario = scenario.replace(reporting_mode="silent" if silent else "report_new_classes")
    if oracle_k is not None:
        scenario = scenario.replace(clustering=replace(scenario.clustering, oracle_k=oracle_k))
    reporting = scenario.reporting_mode == "report_new_classes"
    master = scenario.master_seed

    public, pool = build_corpus(scenario)
    state = GlobalState.initial(public)
    registry = LabelRegistry()
    for lab in sorted(scenario.public_labels):
        registry.add(lab, scenario.label_names[lab])
    clients = [Client(m, {s: s for s in scenario.user_labels[m - 1]}) for m in range(1, scenario.num_users + 1)]
    label_truth = {lab: lab for lab in scenario.public_labels}

    metrics: list[MetricsRecord] = []
    resolutions: list[ResolutionReport] = []
    user_global: dict[tuple[int, int], float] = {}
    events: list[str] = []

    for i in range(1, scenario.num_iterations + 1):
        assignment = partition_round(scenario, pool, i, [c.known_sources for c in clients])
        assignment = apply_injection(assignment, scenario, pool, i)
        outputs = []
        for client, data, arch in zip(clients, assignment.datasets, assignment.architectures):
            out = local_round(
                client, data, state.public, state,
                reporting=reporting, architecture=arch, train_cfg=scenario.training,
                choice2_cfg=scenario.choice2_training,
                init_seed=derive_seed(master, _INIT, i, client.user),
            )
            if out.skipped:
                events.append(f"iteration {i}: user {client.user} skipped ({out.note})")
            outputs.append(out)

        report = ResolutionReport(i)
        if any(o.reports_new_classes for o in outputs):
            truth = None
            if scenario.clustering.oracle_k:
                slot_truth = {(o.user, s): src for o in outputs for s, src in enumerate(o.slot_sources)}

                def truth(key, slot_truth=slot_truth):
                    return slot_truth[key[1:]] if key[0] == "slot" else label_truth[key[1]]

            state, report = global_update_choice2(
                outputs, state, registry, synthesis=scenario.synthesis, cluster_cfg=scenario.clustering,
                iteration=i, seed=master, oracle_truth=truth,
            )
            report.slot_truth = {(o.user, s): src for o in outputs for s, src in enumerate(o.slot_sources)}
            resolutions.append(report)
            by_user = {o.user: o for o in outputs}
            for (user, slot), lab in sorted(report.mapping.items()):
                client = clients[user - 1]
                src = by_user[user].slot_sources[slot]
                client.aliases[src] = lab
                client.pending.pop(src, None)
                if lab in report.minted:
                    label_truth.setdefault(lab, src)
            for user, slot in report.deferred:
                events.append(f"iteration {i}: user {user} slot {slot} deferred (synthesis diverged)")
            if report.low_confidence:
                events.append(f"iteration {i}: no split met the separation floor, announcements merged")

        state = global_update_choice1(outputs, state)
        state.iteration = i

        Y, N = len(state.labels), len(state.public)
        round_rows = []
        for o in outputs:
            resolved = len({lab for (u, _), lab in report.mapping.items() if u == o.user})
            round_rows.append(MetricsRecord(i, f"user{o.user}", "local", o.accuracy, Y, N, resolved))
        for o in outputs:
            resolved = len({lab for (u, _), lab in report.mapping.items() if u == o.user})
            acc = restricted_accuracy(state, clients[o.user - 1].label_set)
            user_global[(i, o.user)] = acc
            round_rows.append(MetricsRecord(i, f"user{o.user}", "global", acc, Y, N, resolved))
        round_rows.append(MetricsRecord(i, GLOBAL, "global", global_accuracy(state), Y, N,
                                        len(report.resolved_labels)))
        metrics.extend(round_rows)
        if progress is not None:
            progress(i, round_rows)

    return RunResult(scenario, metrics, state, resolutions, user_global, label_truth, events, registry)
