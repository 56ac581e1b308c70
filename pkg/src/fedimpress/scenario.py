"""Scenario files: users, label splits, schedules and hyperparameters.

Scenarios are YAML documents. Every problem found while loading carries
the line number of the offending entry so the CLI can point at it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError, ParseError
from .impressions import SynthesisConfig
from .nn import ACTIVATIONS, TrainConfig

REPORTING_MODES = ("report_new_classes", "silent")


@dataclass(frozen=True)
class Architecture:
    hidden: tuple[int, ...] = ()
    activation: str = "relu"


@dataclass(frozen=True)
class Injection:
    user: int
    iteration: int
    label: int
    count: int


@dataclass(frozen=True)
class ArchitectureChange:
    user: int
    iteration: int
    architecture: Architecture


@dataclass(frozen=True)
class CorpusConfig:
    feature_dim: int = 40
    separation: float = 4.0
    spread: float = 1.0
    public_frames_per_label: int = 300
    pool_frames_per_label: int = 1500
    file: str | None = None


@dataclass(frozen=True)
class ClusteringConfig:
    oracle_k: bool = False
    k_max: int = 4
    # on unit-length impression means; 1.1 is a cosine of about 0.4
    min_separation: float = 1.1


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a simulation run depends on. Users are numbered from 1."""

    name: str
    num_users: int
    num_iterations: int
    label_names: tuple[str, ...]
    public_labels: tuple[int, ...]
    user_labels: tuple[tuple[int, ...], ...]
    user_architectures: tuple[Architecture, ...]
    frames_per_label: tuple[int, int] = (200, 300)
    reporting_mode: str = "report_new_classes"
    injections: tuple[Injection, ...] = ()
    architecture_changes: tuple[ArchitectureChange, ...] = ()
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    choice2_training: TrainConfig | None = None
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    master_seed: int = 0

    @property
    def feature_dim(self) -> int:
        return self.corpus.feature_dim

    def label_id(self, name: str) -> int:
        return self.label_names.index(name)

    def architecture(self, user: int, iteration: int) -> Architecture:
        """Architecture in force for ``user`` at ``iteration`` (latest change wins)."""
        arch = self.user_architectures[user - 1]
        for change in sorted(self.architecture_changes, key=lambda c: c.iteration):
            if change.user == user and change.iteration <= iteration:
                arch = change.architecture
        return arch

    def injections_at(self, iteration: int) -> list[Injection]:
        return [inj for inj in self.injections if inj.iteration == iteration]

    def new_labels(self) -> list[int]:
        """Distinct injected labels in order of first appearance."""
        seen: list[int] = []
        for inj in sorted(self.injections, key=lambda j: (j.iteration, j.user)):
            if inj.label not in seen:
                seen.append(inj.label)
        return seen

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Finding:
    message: str
    line: int | None = None
    field: str | None = None

    def __str__(self) -> str:
        loc = f"line {self.line}: " if self.line is not None else ""
        fld = f"[{self.field}] " if self.field else ""
        return f"{loc}{fld}{self.message}"


class _Doc:
    """Parsed YAML plus the node tree, for line lookups."""

    def __init__(self, text: str, path: str | None):
        self.path = path
        try:
            self.root = yaml.compose(text)
            self.data = yaml.safe_load(text)
        except yaml.MarkedYAMLError as exc:
            line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
            raise ParseError(f"invalid YAML: {exc.problem}", line=line, path=path) from None
        if not isinstance(self.data, dict):
            raise ParseError("scenario must be a mapping", line=1, path=path)

    def line(self, *keys) -> int | None:
        node = self.root
        best = node.start_mark.line + 1 if node is not None else None
        for key in keys:
            if isinstance(node, yaml.MappingNode):
                nxt = None
                for k, v in node.value:
                    if k.value == key:
                        nxt = v
                        best = k.start_mark.line + 1
                        break
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
                best = node.start_mark.line + 1
            else:
                node = None
            if node is None:
                break
        return best


def _get(doc: _Doc, mapping: dict, key: str, kind, *path, default=dataclasses.MISSING):
    if key not in mapping:
        if default is dataclasses.MISSING:
            raise ConfigurationError(_where(doc, f"missing field '{'.'.join(map(str, (*path, key)))}'", *path))
        return default
    value = mapping[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigurationError(
            _where(doc, f"field '{'.'.join(map(str, (*path, key)))}' must be {kind.__name__}", *path, key)
        )
    return value


def _where(doc: _Doc, message: str, *path) -> str:
    line = doc.line(*path)
    prefix = f"{doc.path}:" if doc.path else ""
    return f"{prefix}{line}: {message}" if line else f"{prefix} {message}"


def _section(doc: _Doc, name: str) -> dict:
    sec = doc.data.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigurationError(_where(doc, f"section '{name}' must be a mapping", name))
    return sec


def _label(doc: _Doc, names: list[str], value, *path) -> int:
    if not isinstance(value, str) or value not in names:
        hint = " (quote it: YAML reads yes/no/on/off as booleans)" if isinstance(value, bool) else ""
        raise ConfigurationError(_where(doc, f"unknown label {value!r}{hint}", *path))
    return names.index(value)


def _arch(doc: _Doc, entry: dict, *path) -> Architecture:
    hidden = entry.get("hidden", [])
    if not isinstance(hidden, list) or not all(isinstance(w, int) and w > 0 for w in hidden):
        raise ConfigurationError(_where(doc, "hidden must be a list of positive integers", *path, "hidden"))
    act = entry.get("activation", "relu")
    if act not in ACTIVATIONS:
        raise ConfigurationError(_where(doc, f"activation must be one of {ACTIVATIONS}", *path, "activation"))
    return Architecture(tuple(hidden), act)


def _train_cfg(doc: _Doc, sec: dict, name: str) -> TrainConfig:
    return TrainConfig(
        epochs=_get(doc, sec, "epochs", int, name, default=TrainConfig.epochs),
        learning_rate=_get(doc, sec, "learning_rate", float, name, default=TrainConfig.learning_rate),
        batch_size=_get(doc, sec, "batch_size", int, name, default=TrainConfig.batch_size),
    )


def parse_scenario(text: str, path: str | None = None) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from YAML text.

    Raises :class:`ParseError` for malformed YAML and
    :class:`ConfigurationError` (message prefixed with ``path:line``) for
    structurally invalid content.
    """
    doc = _Doc(text, path)
    d = doc.data
    labels = _section(doc, "labels")
    names = _get(doc, labels, "universe", list, "labels")
    if len(set(names)) != len(names) or not all(isinstance(n, str) for n in names):
        raise ConfigurationError(_where(doc, "label universe must be distinct strings (quote names such as 'Yes' or 'On', which YAML reads as booleans)", "labels", "universe"))
    public = [_label(doc, names, n, "labels", "public", i) for i, n in enumerate(_get(doc, labels, "public", list, "labels"))]
    frames = _get(doc, labels, "frames_per_label", list, "labels")
    if len(frames) != 2 or not all(isinstance(v, int) for v in frames):
        raise ConfigurationError(_where(doc, "frames_per_label must be [min, max]", "labels", "frames_per_label"))

    users_raw = _get(doc, d, "users", list)
    user_labels, user_arch = [], []
    for m, entry in enumerate(users_raw):
        if not isinstance(entry, dict):
            raise ConfigurationError(_where(doc, "user entry must be a mapping", "users", m))
        lm = _get(doc, entry, "labels", list, "users", m)
        user_labels.append(tuple(_label(doc, names, n, "users", m, "labels", i) for i, n in enumerate(lm)))
        user_arch.append(_arch(doc, entry, "users", m))
    num_users = _get(doc, d, "num_users", int, default=len(users_raw))

    injections = []
    for j, entry in enumerate(d.get("injections", []) or []):
        injections.append(
            Injection(
                user=_get(doc, entry, "user", int, "injections", j),
                iteration=_get(doc, entry, "iteration", int, "injections", j),
                label=_label(doc, names, _get(doc, entry, "label", str, "injections", j), "injections", j, "label"),
                count=_get(doc, entry, "count", int, "injections", j),
            )
        )
    changes = []
    for j, entry in enumerate(d.get("architecture_changes", []) or []):
        changes.append(
            ArchitectureChange(
                user=_get(doc, entry, "user", int, "architecture_changes", j),
                iteration=_get(doc, entry, "iteration", int, "architecture_changes", j),
                architecture=_arch(doc, entry, "architecture_changes", j),
            )
        )

    c = _section(doc, "corpus")
    corpus = CorpusConfig(
        feature_dim=_get(doc, c, "feature_dim", int, "corpus", default=CorpusConfig.feature_dim),
        separation=_get(doc, c, "separation", float, "corpus", default=CorpusConfig.separation),
        spread=_get(doc, c, "spread", float, "corpus", default=CorpusConfig.spread),
        public_frames_per_label=_get(
            doc, c, "public_frames_per_label", int, "corpus", default=CorpusConfig.public_frames_per_label
        ),
        pool_frames_per_label=_get(
            doc, c, "pool_frames_per_label", int, "corpus", default=CorpusConfig.pool_frames_per_label
        ),
        file=_get(doc, c, "file", str, "corpus", default=None),
    )
    if corpus.file is not None and path is not None and not Path(corpus.file).is_absolute():
        corpus = dataclasses.replace(corpus, file=str(Path(path).parent / corpus.file))

    training = _train_cfg(doc, _section(doc, "training"), "training")
    choice2 = _train_cfg(doc, _section(doc, "choice2_training"), "choice2_training") if "choice2_training" in d else None

    s = _section(doc, "synthesis")
    dflt = SynthesisConfig()
    init = _get(doc, s, "init_range", list, "synthesis", default=list(dflt.init_range))
    try:
        synthesis = SynthesisConfig(
            samples_per_class=_get(doc, s, "samples_per_class", int, "synthesis", default=dflt.samples_per_class),
            dirichlet_scale=_get(doc, s, "dirichlet_scale", float, "synthesis", default=dflt.dirichlet_scale),
            concentration_floor=_get(
                doc, s, "concentration_floor", float, "synthesis", default=dflt.concentration_floor
            ),
            max_steps=_get(doc, s, "max_steps", int, "synthesis", default=dflt.max_steps),
            step_size=_get(doc, s, "step_size", float, "synthesis", default=dflt.step_size),
            loss_tolerance=_get(doc, s, "loss_tolerance", float, "synthesis", default=dflt.loss_tolerance),
            init_range=tuple(init),
        )
    except ConfigurationError as exc:
        raise ConfigurationError(_where(doc, str(exc), "synthesis")) from None

    k = _section(doc, "clustering")
    clustering = ClusteringConfig(
        oracle_k=_get(doc, k, "oracle_k", bool, "clustering", default=ClusteringConfig.oracle_k),
        k_max=_get(doc, k, "k_max", int, "clustering", default=ClusteringConfig.k_max),
        min_separation=_get(doc, k, "min_separation", float, "clustering", default=ClusteringConfig.min_separation),
    )
    mode = _get(doc, d, "reporting_mode", str, default="report_new_classes")
    if mode not in REPORTING_MODES:
        raise ConfigurationError(_where(doc, f"reporting_mode must be one of {REPORTING_MODES}", "reporting_mode"))

    return ScenarioConfig(
        name=_get(doc, d, "name", str, default=Path(path).stem if path else "scenario"),
        num_users=num_users,
        num_iterations=_get(doc, d, "num_iterations", int),
        label_names=tuple(names),
        public_labels=tuple(public),
        user_labels=tuple(user_labels),
        user_architectures=tuple(user_arch),
        frames_per_label=(frames[0], frames[1]),
        reporting_mode=mode,
        injections=tuple(injections),
        architecture_changes=tuple(changes),
        corpus=corpus,
        training=training,
        choice2_training=choice2,
        synthesis=synthesis,
        clustering=clustering,
        master_seed=_get(doc, d, "master_seed", int, default=0),
    )


def validate_scenario(text: str, path: str | None = None) -> list[Finding]:
    """All problems with a scenario; an empty list means it is runnable."""
    try:
        sc = parse_scenario(text, path)
    except (ParseError, ConfigurationError) as exc:
        return [Finding(str(exc), getattr(exc, "line", None))]
    doc = _Doc(text, path)
    return check_scenario(sc, doc.line)


def check_scenario(sc: ScenarioConfig, line=lambda *keys: None) -> list[Finding]:
    """Semantic checks on an already parsed scenario."""
    out: list[Finding] = []
    M, I = sc.num_users, sc.num_iterations
    names = sc.label_names
    if M < 1:
        out.append(Finding("num_users must be >= 1", line("num_users"), "num_users"))
    if len(sc.user_labels) != M:
        out.append(Finding(f"{len(sc.user_labels)} user entries for num_users={M}", line("users"), "users"))
    if I < 1:
        out.append(Finding("num_iterations must be >= 1", line("num_iterations"), "num_iterations"))
    lo, hi = sc.frames_per_label
    if not 0 < lo <= hi:
        out.append(Finding("frames_per_label must satisfy 0 < min <= max", line("labels", "frames_per_label"), "labels.frames_per_label"))
    if len(set(sc.public_labels)) != len(sc.public_labels) or not sc.public_labels:
        out.append(Finding("public label set must be non-empty and distinct", line("labels", "public"), "labels.public"))
    public = set(sc.public_labels)
    for m, lm in enumerate(sc.user_labels):
        for j, c in enumerate(lm):
            if c not in public:
                out.append(Finding(f"user {m + 1} label {names[c]!r} is not in the public label set",
                                   line("users", m, "labels", j), f"users[{m}].labels"))
        if not lm:
            out.append(Finding(f"user {m + 1} has no labels", line("users", m), f"users[{m}]"))
    held = set().union(*map(set, sc.user_labels)) if sc.user_labels else set()
    for c in sorted(public - held):
        out.append(Finding(f"public label {names[c]!r} is held by no user", line("labels", "public"), "labels.public"))

    for j, inj in enumerate(sc.injections):
        where = ("injections", j)
        if not 1 <= inj.user <= M:
            out.append(Finding(f"unknown user {inj.user} (scenario has {M})", line(*where, "user"), f"injections[{j}].user"))
        if not 1 <= inj.iteration <= I:
            out.append(Finding(f"unreachable injection at iteration {inj.iteration} (run has {I})",
                               line(*where, "iteration"), f"injections[{j}].iteration"))
        if inj.label in public:
            out.append(Finding(f"label collision: {names[inj.label]!r} is already in the public label set",
                               line(*where, "label"), f"injections[{j}].label"))
        if inj.count < 1:
            out.append(Finding("injection count must be positive", line(*where, "count"), f"injections[{j}].count"))
    seen = {}
    for j, inj in enumerate(sc.injections):
        key = (inj.user, inj.iteration, inj.label)
        if key in seen:
            out.append(Finding(f"duplicate injection of {names[inj.label]!r} for user {inj.user} at iteration {inj.iteration}",
                               line("injections", j), f"injections[{j}]"))
        seen[key] = j
    arch_seen = {}
    for j, ch in enumerate(sc.architecture_changes):
        if not 1 <= ch.user <= M:
            out.append(Finding(f"unknown user {ch.user} (scenario has {M})", line("architecture_changes", j, "user"),
                               f"architecture_changes[{j}].user"))
        if not 1 <= ch.iteration <= I:
            out.append(Finding(f"unreachable architecture change at iteration {ch.iteration} (run has {I})",
                               line("architecture_changes", j, "iteration"), f"architecture_changes[{j}].iteration"))
        key = (ch.user, ch.iteration)
        if key in arch_seen and sc.architecture_changes[arch_seen[key]] != ch:
            out.append(Finding(f"conflicting architecture changes for user {ch.user} at iteration {ch.iteration}",
                               line("architecture_changes", j), f"architecture_changes[{j}]"))
        arch_seen[key] = j

    c = sc.corpus
    if c.file is None:
        if c.feature_dim < len(names):
            out.append(Finding(f"feature_dim {c.feature_dim} too small for {len(names)} separated class means",
                               line("corpus", "feature_dim"), "corpus.feature_dim"))
        if c.separation <= 0 or c.spread <= 0:
            out.append(Finding("separation and spread must be positive", line("corpus"), "corpus"))
        if c.public_frames_per_label < 1:
            out.append(Finding("public_frames_per_label must be positive", line("corpus", "public_frames_per_label"),
                               "corpus.public_frames_per_label"))
        # worst case: every user that could hold a label draws max frames in one round
        for lab in range(len(names)):
            holders = sum(lab in lm for lm in sc.user_labels) + len({i.user for i in sc.injections if i.label == lab})
            per_round = {}
            for inj in sc.injections:
                if inj.label == lab:
                    per_round[inj.iteration] = per_round.get(inj.iteration, 0) + inj.count
            need = min(holders, M) * hi + max(per_round.values(), default=0)
            if need > c.pool_frames_per_label:
                out.append(Finding(f"pool of {c.pool_frames_per_label} frames may be insufficient for label "
                                   f"{names[lab]!r} (worst case {need} per round)",
                                   line("corpus", "pool_frames_per_label"), "corpus.pool_frames_per_label"))
    if sc.clustering.k_max < 1:
        out.append(Finding("k_max must be >= 1", line("clustering", "k_max"), "clustering.k_max"))
    if not sc.clustering.min_separation > 0:
        out.append(Finding("min_separation must be positive", line("clustering", "min_separation"),
                           "clustering.min_separation"))
    return out


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Parse and check a scenario file; any finding raises :class:`ConfigurationError`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read scenario {path}: {exc.strerror}") from None
    sc = parse_scenario(text, str(path))
    findings = check_scenario(sc, _Doc(text, str(path)).line)
    if findings:
        raise ConfigurationError(f"{path}: " + "; ".join(map(str, findings)))
    return sc


def bundled_scenarios() -> list[str]:
    root = resources.files("fedimpress") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_scenario_path(name: str) -> Path:
    """Filesystem path of a scenario shipped with the package (``gkws_homogeneous`` ...)."""
    p = Path(str(resources.files("fedimpress") / "scenarios" / f"{name}.yaml"))
    if not p.exists():
        raise ConfigurationError(f"no bundled scenario {name!r}; available: {bundled_scenarios()}")
    return p


def load_bundled(name: str, **overrides: Any) -> ScenarioConfig:
    sc = load_scenario(bundled_scenario_path(name))
    return sc.replace(**overrides) if overrides else sc
