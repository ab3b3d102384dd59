"""Command-line entry point: ``estimate``, ``simulate`` and ``oracle``.

Each command reads one JSON config; scalar flags override its fields. Exit
codes: 0 success, 2 configuration or data error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .data import (
    DEFAULT_TRUNC,
    ESTIMAND_KINDS,
    ArmSpec,
    ConfigError,
    EstimandSpec,
    EstimationError,
    MediatorPartition,
    load_table,
)
from .estimators import ESTIMATORS, EstimateResult, render_table, replicate
from .nuisance import LearnerStacks
from .oracle import DiscreteLaw, canonical_law, exact_iie_variance, summarize
from .simharness import (
    CHECKED,
    RobustnessScenario,
    _map,
    run_consistency_sweep,
    run_coverage_study,
    run_injected_coverage,
    run_robustness_matrix,
    well_specified_stacks,
)

log = logging.getLogger("targetmed")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 2, 3
COMMANDS = ("estimate", "simulate", "oracle")
STUDIES = ("consistency", "robustness", "coverage")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything needed to reproduce one run; serialised into the manifest."""

    command: str
    data: str | None = None
    law: str | None = None
    schema: dict = field(default_factory=dict)
    partition: dict = field(default_factory=dict)
    arms: dict = field(default_factory=lambda: {"a_prime": 1.0, "a_star": 0.0})
    estimands: list[str] = field(default_factory=lambda: list(ESTIMAND_KINDS))
    estimators: list[str] = field(default_factory=lambda: list(ESTIMATORS))
    folds: list[int] = field(default_factory=lambda: [5])
    seeds: list[int] = field(default_factory=lambda: [1])
    stabilize: bool = True
    trunc: float = DEFAULT_TRUNC
    learners: Any = None
    cutoff: str = ""
    out: str | None = None
    study: str = "consistency"
    n_grid: list[int] = field(default_factory=lambda: [500, 2000, 8000])
    reps: int = 200
    conditions: list[str] = field(default_factory=lambda: list(CHECKED))
    base_seed: int = 0
    plots: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "command" not in d:
            raise ConfigError("config must name a command")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for kind in self.estimands:
            if kind not in ESTIMAND_KINDS:
                raise ConfigError(f"unknown estimand {kind!r}")
        for name in self.estimators:
            if name not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {name!r}")
        if not self.folds or any(int(j) < 2 for j in self.folds):
            raise ConfigError("folds must be a non-empty list of integers >= 2")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0.0 <= self.trunc < 0.5:
            raise ConfigError("trunc must lie in [0, 0.5)")
        if self.command == "estimate" and not self.data:
            raise ConfigError("estimate needs a data path")
        if self.command == "simulate" and self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}")
        for c in self.conditions:
            if c not in CHECKED:
                raise ConfigError(f"unknown robustness condition {c!r}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_seeds(text: str) -> list[int]:
    """``"1..10"``, ``"3"`` or ``"1,4,9"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if hi < lo:
                raise ConfigError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse seeds {text!r}") from exc


def load_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    doc["command"] = args.command
    if args.out is not None:
        doc["out"] = args.out
    if args.seeds is not None:
        doc["seeds"] = parse_seeds(args.seeds)
    if args.folds is not None:
        doc["folds"] = [args.folds]
    if args.no_stabilize:
        doc["stabilize"] = False
    if args.trunc is not None:
        doc["trunc"] = args.trunc
    return RunConfig.from_dict(doc)


def _index_of(ref, names: Sequence[str]) -> int:
    if isinstance(ref, int):
        if not 0 <= ref < len(names):
            raise ConfigError(f"mediator index {ref} out of range")
        return ref
    if ref not in names:
        raise ConfigError(f"mediator {ref!r} is not in the mediator list {list(names)}")
    return list(names).index(ref)


def build_estimands(cfg: RunConfig, mediator_names: Sequence[str]) -> list[EstimandSpec]:
    arms = ArmSpec(float(cfg.arms.get("a_prime", 1.0)), float(cfg.arms.get("a_star", 0.0)))
    part = None
    if cfg.partition:
        if "k" not in cfg.partition:
            raise ConfigError("partition must name the target mediator 'k'")
        part = MediatorPartition(
            tuple(_index_of(r, mediator_names) for r in cfg.partition.get("z", [])),
            _index_of(cfg.partition["k"], mediator_names),
            tuple(_index_of(r, mediator_names) for r in cfg.partition.get("l", [])),
        )
    out = []
    for kind in cfg.estimands:
        if kind != "theta_all" and part is None:
            raise ConfigError(f"{kind} needs a partition in the config")
        spec = EstimandSpec(kind, part if kind != "theta_all" else None, arms)
        spec.effective_partition(len(mediator_names))
        out.append(spec)
    return out


def write_manifest(cfg: RunConfig, out: Path, outputs: Sequence[str]) -> None:
    import scipy

    manifest = {
        "config": asdict(cfg),
        "config_sha256": cfg.digest(),
        "seeds": list(cfg.seeds),
        "versions": {"targetmed": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                  default=str) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------------------
# commands


@dataclass(frozen=True)
class _Cell:
    table: Any
    estimand: EstimandSpec
    J: int
    seeds: tuple[int, ...]
    stacks: LearnerStacks
    estimators: tuple[str, ...]
    stabilize: bool
    trunc: float


def _run_cell(cell: _Cell):
    return replicate(cell.table, cell.estimand, cell.seeds, cell.J, cell.stacks,
                     cell.estimators, cell.stabilize, cell.trunc)


def cmd_estimate(cfg: RunConfig) -> int:
    table = load_table(cfg.data, cfg.schema)
    estimands = build_estimands(cfg, table.mediator_names)
    stacks = LearnerStacks.from_config(cfg.learners)
    out = Path(cfg.out or "out")
    (out / "results").mkdir(parents=True, exist_ok=True)
    cells = [_Cell(table, est, int(J), tuple(cfg.seeds), stacks, tuple(cfg.estimators),
                   cfg.stabilize, cfg.trunc) for J in cfg.folds for est in estimands]
    t0 = time.perf_counter()
    log.info("estimating %d cells on n=%d rows", len(cells), table.n)
    results = _map(_run_cell, cells)
    written, rows = [], []
    by_key: dict[tuple, tuple[EstimateResult, list[EstimateResult]]] = {}
    for cell, res in zip(cells, results):
        for name, pair in res.items():
            by_key[(cell.J, name, cell.estimand.kind)] = pair
    for J in cfg.folds:
        for name in cfg.estimators:
            for est in estimands:
                agg, per_seed = by_key[(int(J), name, est.kind)]
                stem = f"{est.kind}_{name}_J{J}"
                _write_json(out / "results" / f"{stem}.json", agg.to_dict())
                written.append(f"results/{stem}.json")
                if len(per_seed) > 1:
                    _write_seed_table(out / "results" / f"{stem}_seeds.csv", per_seed)
                    written.append(f"results/{stem}_seeds.csv")
                rows.append((agg, cfg.cutoff))
    (out / "table.csv").write_text(render_table(rows))
    written.append("table.csv")
    (out / "timing.json").write_text(json.dumps({"wall_seconds": time.perf_counter() - t0})
                                     + "\n")
    write_manifest(cfg, out, written)
    log.info("wrote %d files to %s", len(written) + 2, out)
    print(render_table(rows), end="")
    return EXIT_OK


def _write_seed_table(path: Path, results: Sequence[EstimateResult]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "theta", "se_theta", "iie", "se_iie", "converged"])
        for r in results:
            writer.writerow([r.seed, repr(r.theta), repr(r.se_theta), repr(r.iie),
                             repr(r.se_iie), r.converged])


def _load_law(cfg: RunConfig) -> DiscreteLaw:
    if cfg.law in (None, "", "canonical"):
        return canonical_law()
    return DiscreteLaw.load(cfg.law)


def cmd_simulate(cfg: RunConfig) -> int:
    law = _load_law(cfg)
    estimands = build_estimands(cfg, law.mediator_names)
    stacks = (LearnerStacks.from_config(cfg.learners) if cfg.learners is not None
              else well_specified_stacks(law))
    out = Path(cfg.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    J = int(cfg.folds[0])
    log.info("running %s study with %d reps", cfg.study, cfg.reps)
    if cfg.study == "consistency":
        report = run_consistency_sweep(law, estimands, cfg.n_grid, cfg.reps, cfg.estimators, J,
                                       stacks, cfg.base_seed, cfg.stabilize)
    elif cfg.study == "coverage":
        report = run_coverage_study(law, estimands, int(cfg.n_grid[-1]), cfg.reps,
                                    cfg.estimators, J, stacks, cfg.base_seed, cfg.stabilize)
        corrupted = [c for c in cfg.conditions if c == "none_satisfied"]
        prime = [e for e in estimands if e.kind == "theta_k_prime"]
        if corrupted and prime:
            report.extend(run_injected_coverage(RobustnessScenario(law, "none_satisfied"),
                                                prime[0], int(cfg.n_grid[-1]), cfg.reps,
                                                cfg.base_seed))
    else:
        prime = [e for e in estimands if e.kind == "theta_k_prime"]
        if not prime:
            raise ConfigError("the robustness study needs theta_k_prime among the estimands")
        scenarios = [RobustnessScenario(law, c) for c in cfg.conditions]
        report = run_robustness_matrix(scenarios, prime[0], cfg.n_grid, cfg.reps, cfg.base_seed)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    report.write_timing(out / "timing.json")
    written = ["report.csv", "report.json"]
    if cfg.plots:
        written += [p.name for p in report.plot(out)]
    write_manifest(cfg, out, written)
    with (out / "report.csv").open() as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    law = _load_law(cfg)
    if not cfg.partition and law.K >= 2:
        k = law.K // 2
        cfg.partition = {"z": list(range(k)), "k": k, "l": list(range(k + 1, law.K))}
    estimands = build_estimands(cfg, law.mediator_names)
    summaries = []
    for est, s in zip(estimands, summarize(law, estimands)):
        d = s.to_dict()
        d["iie_eif_variance"] = exact_iie_variance(law, est)
        summaries.append(d)
    doc = {"estimands": summaries}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.json").write_text(text)
        write_manifest(cfg, out, ["oracle.json"])
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="targetmed", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seeds", help="seed list: '1..10' or '1,2,3'")
    parser.add_argument("--folds", type=int, help="number of cross-fitting folds J")
    parser.add_argument("--no-stabilize", action="store_true", help="raw inverse weights")
    parser.add_argument("--trunc", type=float, help="probability truncation bound")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        handler = {"estimate": cmd_estimate, "simulate": cmd_simulate,
                   "oracle": cmd_oracle}[cfg.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
