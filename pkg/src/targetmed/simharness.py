"""Monte Carlo studies: consistency and efficiency, robustness matrix, CI coverage.

Replicate ``i`` of a study uses ``base_seed + i`` both to draw data from the
law and to split folds, so every cell is reproducible from (config, seeds)
regardless of how replicates are scheduled.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .data import ConfigError, EstimandSpec, partition_folds
from .eif import eif_for, plugin_term
from .estimators import ESTIMATORS, Z95, estimate
from .nuisance import LearnerStacks
from .oracle import (
    DiscreteLaw,
    ExactNuisances,
    exact_bias,
    exact_eif_variance,
    exact_nuisances,
    exact_theta,
    sample,
)

NUISANCE_COLUMNS = ("b", "g", "q", "r", "s", "u", "v")
CHECKED = {
    "a": frozenset({"b", "q", "s", "v"}),
    "b": frozenset({"b", "g", "q", "s"}),
    "c": frozenset({"q", "r", "v"}),
    "d": frozenset({"g", "q", "r"}),
    "e": frozenset({"b", "g", "r", "u"}),
    "none_satisfied": frozenset(),
}
WORKERS_ENV = "TARGETMED_WORKERS"
REPORT_FIELDS = ("study", "scenario", "estimand", "estimator", "n", "reps", "retained", "truth",
                 "bias", "mc_se", "rmse", "root_n_rmse", "empirical_se", "mean_se",
                 "efficiency_bound_se", "exact_bias", "coverage", "excluded")


def well_specified_stacks(law: DiscreteLaw) -> LearnerStacks:
    """A single saturated logistic/linear model; with binary covariates it cannot be misspecified."""
    degree = law.w_values.shape[1] + law.K + 1
    return LearnerStacks(default=({"kind": "glm", "interactions": degree},))


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def _map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# report


@dataclass
class SimReport:
    """One row per (study, scenario, estimand, estimator, n).

    Wall time is kept in ``timing`` and written to a separate file so that
    the report itself is byte-identical across reruns.
    """

    rows: list[dict] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)
    estimates: dict[str, list[float]] = field(default_factory=dict)

    def extend(self, other: "SimReport") -> "SimReport":
        self.rows.extend(other.rows)
        self.timing.update(other.timing)
        self.estimates.update(other.estimates)
        return self

    def find(self, **keys) -> dict:
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in keys.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} report rows match {keys}")
        return hits[0]

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n",
                                    extrasaction="ignore")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in REPORT_FIELDS})

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"rows": self.rows}, indent=2, sort_keys=True) + "\n")

    def write_timing(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")

    def plot(self, out_dir: str | Path) -> list[Path]:
        return plot_report(self, out_dir)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summarize_cell(estimates: NDArray, ses: NDArray, truth: float, excluded: int = 0,
                   bound_se: float | None = None) -> dict:
    """Bias, Monte Carlo SE of the bias, RMSE, empirical and mean estimated SE, coverage."""
    est = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    reps = est.size
    if reps == 0:
        raise ConfigError("no retained replicates to summarize")
    err = est - truth
    bias = float(err.mean())
    var = float(err.var())
    emp_se = float(est.std(ddof=1)) if reps > 1 else 0.0
    lo, hi = est - Z95 * ses, est + Z95 * ses
    return {
        "retained": reps,
        "truth": float(truth),
        "bias": bias,
        "mc_se": emp_se / math.sqrt(reps),
        "rmse": math.sqrt(bias * bias + var),
        "empirical_se": emp_se,
        "mean_se": float(ses.mean()),
        "efficiency_bound_se": bound_se,
        "coverage": float(np.mean((lo <= truth) & (truth <= hi))),
        "excluded": excluded,
    }


# ---------------------------------------------------------------------------
# consistency / coverage with fitted nuisances


@dataclass(frozen=True)
class _FitTask:
    law: DiscreteLaw
    estimands: tuple[EstimandSpec, ...]
    n: int
    seed: int
    J: int
    stacks: LearnerStacks
    estimators: tuple[str, ...]
    stabilize: bool


def _run_fit_task(task: _FitTask) -> dict:
    table = sample(task.law, task.n, task.seed)
    plan = partition_folds(table, task.J, task.seed)
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for est in task.estimands:
            res = estimate(table, plan, est, task.stacks, task.estimators, task.stabilize)
            for name, r in res.items():
                out[(est.kind, name)] = (r.theta, r.se_theta, r.converged)
    return out


def _fitted_study(study: str, law: DiscreteLaw, estimands: Sequence[EstimandSpec],
                  n_grid: Sequence[int], reps: int, estimators: Sequence[str], J: int,
                  stacks: LearnerStacks | None, base_seed: int, stabilize: bool,
                  workers: int | None) -> SimReport:
    stacks = stacks or well_specified_stacks(law)
    report = SimReport()
    truths = {e.kind: exact_theta(law, e) for e in estimands}
    bounds = {e.kind: exact_eif_variance(law, e) for e in estimands}
    for n in n_grid:
        t0 = time.perf_counter()
        tasks = [_FitTask(law, tuple(estimands), int(n), base_seed + i, J, stacks,
                          tuple(estimators), stabilize) for i in range(reps)]
        results = _map(_run_fit_task, tasks, workers)
        report.timing[f"{study}:n={n}"] = time.perf_counter() - t0
        for est in estimands:
            for name in estimators:
                cells = [r[(est.kind, name)] for r in results]
                kept = [c for c in cells if c[2]]
                thetas = np.array([c[0] for c in kept])
                ses = np.array([c[1] for c in kept])
                row = {"study": study, "scenario": "well_specified", "estimand": est.kind,
                       "estimator": name, "n": int(n), "reps": reps}
                row.update(summarize_cell(thetas, ses, truths[est.kind], len(cells) - len(kept),
                                          math.sqrt(bounds[est.kind] / n)))
                row["root_n_rmse"] = math.sqrt(n) * row["rmse"]
                report.rows.append(row)
                report.estimates[f"{study}:{est.kind}:{name}:{n}"] = thetas.tolist()
    return report


def run_consistency_sweep(law: DiscreteLaw, estimands: Sequence[EstimandSpec],
                          n_grid: Sequence[int], reps: int,
                          estimators: Sequence[str] = ESTIMATORS, J: int = 5,
                          stacks: LearnerStacks | None = None, base_seed: int = 0,
                          stabilize: bool = True, workers: int | None = None) -> SimReport:
    """Bias, sqrt(n)-RMSE and SE against the enumerated efficiency bound for each n."""
    if reps < 50:
        raise ConfigError("consistency sweeps need reps >= 50")
    return _fitted_study("consistency", law, estimands, n_grid, reps, estimators, J, stacks,
                         base_seed, stabilize, workers)


def run_coverage_study(law: DiscreteLaw, estimands: Sequence[EstimandSpec], n: int, reps: int,
                       estimators: Sequence[str] = ESTIMATORS, J: int = 5,
                       stacks: LearnerStacks | None = None, base_seed: int = 0,
                       stabilize: bool = True, workers: int | None = None) -> SimReport:
    """Share of 95% Wald intervals containing the enumerated theta."""
    if reps < 500:
        raise ConfigError("coverage studies need reps >= 500")
    return _fitted_study("coverage", law, estimands, [n], reps, estimators, J, stacks,
                         base_seed, stabilize, workers)


# ---------------------------------------------------------------------------
# robustness: injected nuisances


def perturbed_law(law: DiscreteLaw) -> DiscreteLaw:
    """Fixed wrong law: every conditional probability ``p`` becomes ``0.3 + 0.4 (1 - p)``."""
    def flip(t):
        return 0.3 + 0.4 * (1.0 - np.asarray(t))
    return replace(law, p_a1=flip(law.p_a1), mediator_p1=tuple(flip(m) for m in law.mediator_p1),
                   y_p1=flip(law.y_p1))


@dataclass(frozen=True)
class RobustnessScenario:
    """Nuisances in ``CHECKED[condition]`` are exact; the rest come from ``wrong_law``.

    Unchecked ``s`` is the limit of its repeated regression built from the
    injected ``b``, ``q`` and ``r``; unchecked ``u`` and ``v`` are that limit
    plus ``shift``. ``lmean`` always marginalises the injected ``b``.
    """

    law: DiscreteLaw
    condition: str
    wrong_law: DiscreteLaw | None = None
    shift: float = 0.1

    def __post_init__(self) -> None:
        if self.condition not in CHECKED:
            raise ConfigError(f"unknown robustness condition {self.condition!r}")

    @property
    def corrupted(self) -> frozenset[str]:
        return frozenset(NUISANCE_COLUMNS) - CHECKED[self.condition]

    def nuisances(self, estimand: EstimandSpec) -> ExactNuisances:
        if estimand.kind != "theta_k_prime":
            raise ConfigError("the robustness matrix is defined for theta_k_prime")
        return inject(self.law, self.wrong_law or perturbed_law(self.law), estimand,
                      self.corrupted, self.shift)


def inject(law: DiscreteLaw, wrong_law: DiscreteLaw, estimand: EstimandSpec,
           corrupted: Iterable[str], shift: float = 0.1) -> ExactNuisances:
    corrupted = set(corrupted)
    unknown = corrupted - set(NUISANCE_COLUMNS)
    if unknown:
        raise ConfigError(f"unknown nuisances {sorted(unknown)}")
    true = exact_nuisances(law, estimand)
    wrong = exact_nuisances(wrong_law, estimand)
    g = wrong.g if "g" in corrupted else true.g
    q1 = wrong.q1 if "q" in corrupted else true.q1
    r1 = wrong.r1 if "r" in corrupted else true.r1
    b = wrong.b if "b" in corrupted else true.b
    ap, ast = int(estimand.arms.a_prime), int(estimand.arms.a_star)

    def two(p1):
        return np.stack([1.0 - p1, p1], axis=-1)

    lmean = (b * true.p_l).sum(axis=3)                         # (w, z, mk)
    r_true, r_inj = two(true.r1), two(r1)                       # (w, z, mk)
    q_star, q_prime = two(q1[ast]), two(q1[ap])                 # (w, mk)
    s_lim = (r_true * q_star[:, None, :] / r_inj * lmean).sum(axis=2)
    u_lim = (true.p_z_mk * q_prime[:, None, :] / r_inj * lmean).sum(axis=1)
    v_lim = (true.p_z * s_lim).sum(axis=1)
    s = s_lim if "s" in corrupted else true.s
    u = u_lim + shift * np.array([1.0, 1.5]) if "u" in corrupted else true.u
    v = v_lim + shift if "v" in corrupted else true.v
    return replace(true, g=g, q1=q1, r1=r1, b=b, lmean=lmean, s=s, u=u, v=v)


def injected_one_step(law: DiscreteLaw, estimand: EstimandSpec, nuisances: ExactNuisances,
                      n: int, seed: int) -> tuple[float, float]:
    """Unstabilised one-step estimate and SE on a fresh sample with injected nuisances."""
    table = sample(law, n, seed)
    ns = nuisances.at(table, law)
    fn = eif_for(estimand.kind)
    draft = fn(table, ns, 0.0, False, estimand.arms)
    theta = float((draft.d_y + draft.d_z + draft.d_mk + draft.d_l + plugin_term(ns)).mean())
    eif = fn(table, ns, theta, False, estimand.arms)
    return theta, float(eif.total.std(ddof=1) / math.sqrt(n))


@dataclass(frozen=True)
class _InjectTask:
    law: DiscreteLaw
    estimand: EstimandSpec
    nuisances: ExactNuisances
    n: int
    seed: int


def _run_inject(task: _InjectTask) -> tuple[float, float]:
    return injected_one_step(task.law, task.estimand, task.nuisances, task.n, task.seed)


def run_robustness_matrix(scenarios: Sequence[RobustnessScenario], estimand: EstimandSpec,
                          n_grid: Sequence[int], reps: int, base_seed: int = 0,
                          workers: int | None = None) -> SimReport:
    """Bias of the one-step estimator when only one robustness subset of nuisances is right.

    Each row also carries ``exact_bias``: the enumerated limit the Monte Carlo
    bias should approach.
    """
    report = SimReport()
    for sc in scenarios:
        truth = exact_theta(sc.law, estimand)
        ex = sc.nuisances(estimand)
        offset = exact_bias(sc.law, estimand, ex)
        for n in n_grid:
            t0 = time.perf_counter()
            tasks = [_InjectTask(sc.law, estimand, ex, int(n), base_seed + i) for i in range(reps)]
            out = np.array(_map(_run_inject, tasks, workers))
            report.timing[f"robustness:{sc.condition}:n={n}"] = time.perf_counter() - t0
            row = {"study": "robustness", "scenario": sc.condition, "estimand": estimand.kind,
                   "estimator": "one_step", "n": int(n), "reps": reps}
            row.update(summarize_cell(out[:, 0], out[:, 1], truth))
            row["root_n_rmse"] = math.sqrt(n) * row["rmse"]
            row["exact_bias"] = offset
            report.rows.append(row)
            report.estimates[f"robustness:{sc.condition}:{n}"] = out[:, 0].tolist()
    return report


def run_injected_coverage(scenario: RobustnessScenario, estimand: EstimandSpec, n: int,
                          reps: int, base_seed: int = 0, workers: int | None = None) -> SimReport:
    """Coverage of Wald intervals built from injected (possibly wrong) nuisances."""
    rep = run_robustness_matrix([scenario], estimand, [n], reps, base_seed, workers)
    for row in rep.rows:
        row["study"] = "coverage"
    return rep


# ---------------------------------------------------------------------------
# plots


def plot_report(report: SimReport, out_dir: str | Path) -> list[Path]:
    """Bias-versus-n lines and coverage bars as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    series: dict[tuple, list[tuple[int, float, float]]] = {}
    for r in report.rows:
        key = (r["study"], r["scenario"], r["estimand"], r["estimator"])
        series.setdefault(key, []).append((r["n"], r["bias"], r["mc_se"]))
    if any(len(v) > 1 for v in series.values()):
        fig, ax = plt.subplots(figsize=(6, 4))
        for key, pts in sorted(series.items()):
            pts.sort()
            ns = [p[0] for p in pts]
            ax.errorbar(ns, [p[1] for p in pts], yerr=[2 * p[2] for p in pts], marker="o",
                        capsize=3, label=" / ".join(key[1:]))
        ax.axhline(0.0, color="black", lw=0.8)
        ax.set_xscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel("bias (+/- 2 MC-SE)")
        ax.legend(fontsize=6)
        fig.tight_layout()
        path = out_dir / "bias_vs_n.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    cov = [r for r in report.rows if r.get("coverage") is not None]
    if cov:
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = [f"{r['scenario']}/{r['estimand']}/{r['estimator']}/n={r['n']}" for r in cov]
        ax.barh(range(len(cov)), [r["coverage"] for r in cov])
        ax.axvline(0.95, color="black", lw=0.8)
        ax.set_yticks(range(len(cov)))
        ax.set_yticklabels(labels, fontsize=6)
        ax.set_xlim(0, 1)
        ax.set_xlabel("coverage of 95% intervals")
        fig.tight_layout()
        path = out_dir / "coverage.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
