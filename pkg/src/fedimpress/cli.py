"""Command-line entry point.

``fedimpress run`` simulates a scenario and writes ``metrics.csv``,
``clusters.csv`` and ``summary.json``; ``fedimpress validate`` lists the
problems in a scenario file; ``fedimpress impress`` synthesizes data
impressions for one class of a saved model.

Exit codes: 0 success, 1 invalid input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, save_feature_file
from .errors import ConfigurationError, FedImpressError, InputError, ParseError
from .federation import GLOBAL, RunResult, run
from .impressions import SynthesisConfig, impressions_for_class
from .nn import forward, load_classifier
from .scenario import (
    ScenarioConfig,
    bundled_scenario_path,
    bundled_scenarios,
    load_scenario,
    validate_scenario,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
METRICS_HEADER = ("iteration", "entity", "phase", "accuracy", "label_count", "public_size", "new_labels_resolved")
CLUSTERS_HEADER = ("iteration", "user", "slot", "pc1", "pc2", "cluster_id")
ARTIFACTS = ("metrics.csv", "clusters.csv", "summary.json")


@dataclass(frozen=True)
class RunManifest:
    scenario: Path
    out: Path
    seed: int | None = None
    silent: bool = False
    oracle_k: bool = False


def resolve_scenario(arg: str) -> Path:
    """A path to a scenario file, or the name of a bundled scenario."""
    p = Path(arg)
    if p.exists():
        return p
    if p.suffix == "" and arg in bundled_scenarios():
        return bundled_scenario_path(arg)
    raise ConfigurationError(
        f"scenario {arg!r} is neither a file nor a bundled scenario ({', '.join(bundled_scenarios())})"
    )


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_metrics(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in result.metrics:
            w.writerow([r.iteration, r.entity, r.phase, _fmt(r.accuracy), r.label_count, r.public_size,
                        r.new_labels_resolved])


def write_clusters(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLUSTERS_HEADER)
        for rep in result.resolutions:
            for p in rep.points:
                w.writerow([rep.iteration, p.user, p.slot, _fmt(p.pc1), _fmt(p.pc2), p.cluster_id])


def _mean(values) -> float | None:
    vals = [v for v in values if np.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def summarize(result: RunResult, manifest: RunManifest) -> dict:
    """Per-user local/global means and increases, plus what each Choice-2 round resolved."""
    sc = result.scenario
    users = []
    for m in range(1, sc.num_users + 1):
        loc = _mean(r.accuracy for r in result.rows(f"user{m}", "local"))
        glob = _mean(r.accuracy for r in result.rows(f"user{m}", "global"))
        inc = None if loc is None or glob is None else glob - loc
        users.append({"user": m, "mean_local": loc, "mean_global": glob, "increase": inc})
    rounds = result.round_summary()
    overall = result.overall_accuracy()
    names = {lab: result.registry.name(lab) for lab in result.final_labels}
    return {
        "scenario": sc.name,
        "scenario_file": str(manifest.scenario),
        "master_seed": sc.master_seed,
        "reporting_mode": sc.reporting_mode,
        "oracle_k": sc.clustering.oracle_k,
        "num_users": sc.num_users,
        "num_iterations": sc.num_iterations,
        "users": users,
        "mean_local": _mean(r[1] for r in rounds),
        "mean_global": _mean(r[2] for r in rounds),
        "rounds_with_increase": sum(1 for _, loc, glob in rounds if glob > loc),
        "final_overall_accuracy": overall[-1][1] if overall else None,
        "final_labels": {str(k): v for k, v in names.items()},
        "final_public_size": len(result.state.public),
        "resolutions": [
            {
                "iteration": rep.iteration,
                "mapping": [{"user": u, "slot": s, "label": lab, "name": result.registry.name(lab)}
                            for (u, s), lab in sorted(rep.mapping.items())],
                "minted": rep.minted,
                "reused": rep.reused,
                "k": rep.k,
                "silhouette": rep.silhouette,
                "low_confidence": rep.low_confidence,
                "deferred": [list(d) for d in rep.deferred],
            }
            for rep in result.resolutions
        ],
        "events": result.events,
    }


def _publish(tmp: Path, out: Path) -> None:
    """Move finished artifacts into ``out``; a fresh directory is renamed in one step."""
    if not out.exists():
        os.replace(tmp, out)
        return
    if not out.is_dir():
        raise ConfigurationError(f"output path {out} exists and is not a directory")
    for name in ARTIFACTS:
        os.replace(tmp / name, out / name)
    shutil.rmtree(tmp, ignore_errors=True)


def cmd_run(manifest: RunManifest, *, progress: bool = True) -> int:
    try:
        scenario = load_scenario(manifest.scenario)
    except (ConfigurationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if manifest.out.exists() and not manifest.out.is_dir():
        print(f"error: output path {manifest.out} exists and is not a directory", file=sys.stderr)
        return EXIT_INVALID

    def report(i: int, rows) -> None:
        by = {(r.entity, r.phase): r.accuracy for r in rows}
        loc = _mean(v for (e, ph), v in by.items() if ph == "local")
        glob = _mean(v for (e, ph), v in by.items() if ph == "global" and e != GLOBAL)
        r = rows[-1]
        print(f"round {i:3d}  local {loc if loc is not None else float('nan'):.4f}  "
              f"global {glob if glob is not None else float('nan'):.4f}  "
              f"|Y| {r.label_count}  |D0| {r.public_size}", file=sys.stderr)

    start = time.perf_counter()
    try:
        result = run(scenario, oracle_k=manifest.oracle_k or None, silent=manifest.silent or None,
                     seed=manifest.seed, progress=report if progress else None)
    except FedImpressError as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    parent = manifest.out.resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".fedimpress-", dir=parent))
    try:
        write_metrics(result, tmp / "metrics.csv")
        write_clusters(result, tmp / "clusters.csv")
        summary = summarize(result, manifest)
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        _publish(tmp, manifest.out)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        print(f"error: cannot write results: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if progress:
        print(f"wrote {', '.join(ARTIFACTS)} to {manifest.out} in {time.perf_counter() - start:.1f} s",
              file=sys.stderr)
    return EXIT_OK


def cmd_validate(path: Path) -> int:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"{path}: cannot read: {exc.strerror}")
        return EXIT_INVALID
    findings = validate_scenario(text, str(path))
    for f in findings:
        print(f"{path}: {f}")
    if findings:
        return EXIT_INVALID
    print(f"{path}: ok")
    return EXIT_OK


def cmd_impress(model_path: Path, label: int, out: Path, *, n: int = 100, beta: float = 1.0,
                seed: int = 0, steps: int | None = None) -> int:
    try:
        model = load_classifier(model_path)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load model {model_path}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if label not in model.label_ids:
        print(f"error: class {label} is not one of the model's labels {list(model.label_ids)}", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = SynthesisConfig(samples_per_class=n, dirichlet_scale=beta, seed=seed)
        if steps is not None:
            cfg = replace(cfg, max_steps=steps)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        batch = impressions_for_class(model, model.label_ids.index(label), cfg)
    except FedImpressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    hit = float(np.mean(forward(model, batch.features).predictions() == label))
    comments = [
        "provenance: data impressions (synthetic, no private samples)",
        f"model: {model_path}",
        f"class: {label}  samples: {n}  dirichlet_scale: {beta}  seed: {seed}",
        f"classified back to class {label}: {hit:.4f}",
    ]
    try:
        save_feature_file(out, Dataset(batch.features, np.full(len(batch.features), label)), comments)
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {n} impressions of class {label} to {out} ({hit:.1%} classified back)", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedimpress", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario")
    p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="override the scenario's master seed")
    p.add_argument("--oracle-k", action="store_true", help="cluster with the true number of new classes")
    p.add_argument("--silent", action="store_true", help="users never report new classes")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-round progress")

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")

    p = sub.add_parser("impress", help="synthesize impressions for one class of a saved model")
    p.add_argument("--model", required=True, type=Path, help="model dump (.npz)")
    p.add_argument("--class", dest="label", required=True, type=int, help="label id")
    p.add_argument("--out", required=True, type=Path, help="feature file to write")
    p.add_argument("--n", type=int, default=100, help="number of impressions (default 100)")
    p.add_argument("--beta", type=float, default=1.0, help="Dirichlet scale (default 1.0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="maximum descent steps per impression")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("run", "validate"):
        try:
            path = resolve_scenario(args.scenario)
        except ConfigurationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        if args.command == "validate":
            return cmd_validate(path)
        if args.seed is not None and args.seed < 0:
            print("error: --seed must be non-negative", file=sys.stderr)
            return EXIT_INVALID
        manifest = RunManifest(path, args.out, args.seed, args.silent, args.oracle_k)
        return cmd_run(manifest, progress=not args.quiet)
    if args.n < 1:
        print("error: --n must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    return cmd_impress(args.model, args.label, args.out, n=args.n, beta=args.beta, seed=args.seed,
                       steps=args.steps)


if __name__ == "__main__":
    sys.exit(main())
