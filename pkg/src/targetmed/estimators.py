"""Cross-fitted one-step and targeted estimators, total effect, IIE and replication."""

from __future__ import annotations

import copy
import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit

from .data import (
    DEFAULT_TRUNC,
    ArmSpec,
    ConfigError,
    CrossFitPlan,
    EstimandSpec,
    EstimationError,
    ObservationTable,
    partition_folds,
    positivity_diagnostics,
)
from .eif import EifTable, eif_for, plugin_term
from .nuisance import CrossFit, LearnerStacks, fit_lmean, fit_nuisances, fit_s, fit_u, \
    fit_u_star, fit_v

Z95 = 1.959964
MAX_ITER = 20
ESTIMATOR_LABELS = {"one_step": "One-step", "tml": "TML"}
TABLE_COLUMNS = ("folds", "estimator", "cutoff", "estimand", "IIE", "SE", "CIlow", "CIupp")
_PROB_FLOOR = 1e-12


def wald_ci(point: float, se: float) -> tuple[float, float]:
    """Symmetric 95% Wald interval ``point -/+ 1.959964 se``."""
    if not se >= 0:
        raise ConfigError(f"standard error must be non-negative, got {se}")
    half = Z95 * se
    return (point - half, point + half)


def _se(values: NDArray) -> float:
    n = values.shape[0]
    if n < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------------------
# result records


@dataclass
class TmlFluctuation:
    eps_y: list[float] = field(default_factory=list)
    eps_mk: list[float] = field(default_factory=list)
    eps_w: list[float] = field(default_factory=list)
    iterations: int = 0
    score_y: float = math.nan
    score_mk: float = math.nan
    tol: float = math.nan
    converged: bool = False

    def to_dict(self) -> dict:
        return {"eps_y": self.eps_y, "eps_mk": self.eps_mk, "eps_w": self.eps_w,
                "iterations": self.iterations, "score_y": self.score_y,
                "score_mk": self.score_mk, "tol": self.tol, "converged": self.converged}


@dataclass(frozen=True)
class TotalEffect:
    """Augmented IPW estimate of ``E[Y_{a'}]`` and its per-row influence function."""

    estimate: float
    eif: NDArray
    se: float


@dataclass
class EstimateResult:
    estimand: str
    estimator: str
    theta: float
    se_theta: float
    n: int
    folds: int
    seed: int | None
    converged: bool = True
    iie: float = math.nan
    se_iie: float = math.nan
    total: float = math.nan
    se_total: float = math.nan
    excluded_replicates: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    eif: EifTable | None = field(default=None, repr=False)
    total_eif: NDArray | None = field(default=None, repr=False)

    @property
    def ci_theta(self) -> tuple[float, float]:
        return wald_ci(self.theta, self.se_theta)

    @property
    def ci_iie(self) -> tuple[float, float]:
        if math.isnan(self.iie):
            return (math.nan, math.nan)
        return wald_ci(self.iie, self.se_iie)

    @property
    def ci_total(self) -> tuple[float, float]:
        if math.isnan(self.total):
            return (math.nan, math.nan)
        return wald_ci(self.total, self.se_total)

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "estimator": self.estimator,
            "theta": self.theta,
            "iie": self.iie,
            "se_theta": self.se_theta,
            "se_iie": self.se_iie,
            "ci_theta": list(self.ci_theta),
            "ci_iie": list(self.ci_iie),
            "total": self.total,
            "se_total": self.se_total,
            "ci_total": list(self.ci_total),
            "n": self.n,
            "folds": self.folds,
            "seed": self.seed,
            "converged": self.converged,
            "excluded_replicates": list(self.excluded_replicates),
            "diagnostics": self.diagnostics,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EstimateResult":
        keys = ("estimand", "estimator", "theta", "se_theta", "n", "folds", "seed", "converged",
                "iie", "se_iie", "total", "se_total", "excluded_replicates", "diagnostics",
                "flags")
        return cls(**{k: d[k] for k in keys if k in d})

    def table_row(self, cutoff: str | float = "") -> list[str]:
        """One row in the (folds, estimator, cutoff, estimand, IIE, SE, CIlow, CIupp) layout."""
        lo, hi = self.ci_iie
        return [str(self.folds), ESTIMATOR_LABELS.get(self.estimator, self.estimator),
                str(cutoff), self.estimand, f"{self.iie:.3f}", f"{self.se_iie:.3f}",
                f"{lo:.3f}", f"{hi:.3f}"]


def render_table(rows: Sequence[tuple[EstimateResult, str | float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for result, cutoff in rows:
        writer.writerow(result.table_row(cutoff))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# total effect and IIE


def total_effect(table: ObservationTable, plan: CrossFitPlan, arms: ArmSpec = ArmSpec(),
                 stacks: LearnerStacks | None = None, stabilize: bool = True,
                 trunc: float = DEFAULT_TRUNC, cf: CrossFit | None = None) -> TotalEffect:
    """Cross-fitted AIPW estimate of ``E[Y_{a'}]``.

    Reuses ``Q`` and ``g`` from ``cf`` when given (any estimand on the same plan).
    """
    if cf is None:
        estimand = EstimandSpec("theta_all", arms=arms)
        cf = fit_nuisances(table, plan, estimand, stacks, trunc)
    ns = cf.assemble()
    ind = (table.a == arms.a_prime).astype(float)
    w = ind / ns.g
    if stabilize:
        w = w / w.mean()
    aug = ns.Q + w * (table.y - ns.Q)
    psi = float(aug.mean())
    eif = aug - psi
    return TotalEffect(psi, eif, _se(eif))


def assemble_iie(total: TotalEffect, theta: EstimateResult) -> EstimateResult:
    """Attach ``IIE = E[Y_{a'}] - theta`` with its influence-function standard error."""
    if theta.eif is None or theta.eif.n != total.eif.shape[0]:
        raise EstimationError("total-effect and theta influence functions are on different rows")
    diff = total.eif - theta.eif.total
    theta.total = total.estimate
    theta.se_total = total.se
    theta.total_eif = total.eif
    theta.iie = total.estimate - theta.theta
    theta.se_iie = _se(diff)
    return theta


# ---------------------------------------------------------------------------
# one-step


def _diagnostics(cf: CrossFit, eif: EifTable) -> dict:
    ns = cf.assemble()
    return {
        "positivity": positivity_diagnostics(ns, cf.trunc).to_dict(),
        "stabilization": eif.factors.to_dict(),
        "nuisance_converged": cf.converged,
        "tml_iterations": 0,
    }


def _flags(table: ObservationTable, theta: float) -> list[str]:
    if table.y_is_binary and not 0.0 <= theta <= 1.0:
        return ["theta_outside_unit_interval"]
    return []


def one_step_from_fit(cf: CrossFit, stabilize: bool = True, seed: int | None = None
                      ) -> EstimateResult:
    """One-step estimate from already-fitted cross-fit nuisances."""
    table, kind = cf.table, cf.estimand.kind
    ns = cf.assemble()
    eif_fn = eif_for(kind)
    draft = eif_fn(table, ns, 0.0, stabilize, cf.estimand.arms)
    theta = float((draft.d_y + draft.d_z + draft.d_mk + draft.d_l + plugin_term(ns)).mean())
    eif = eif_fn(table, ns, theta, stabilize, cf.estimand.arms)
    return EstimateResult(kind, "one_step", theta, _se(eif.total), table.n, cf.plan.J, seed,
                          converged=True, diagnostics=_diagnostics(cf, eif),
                          flags=_flags(table, theta), eif=eif)


def one_step(table: ObservationTable, plan: CrossFitPlan, estimand: EstimandSpec,
             stacks: LearnerStacks | None = None, stabilize: bool = True,
             trunc: float = DEFAULT_TRUNC) -> EstimateResult:
    """Cross-fitted one-step estimator of theta with the IIE attached."""
    cf = fit_nuisances(table, plan, estimand, stacks, trunc)
    res = one_step_from_fit(cf, stabilize, plan.seed)
    return assemble_iie(total_effect(table, plan, estimand.arms, stabilize=stabilize, cf=cf),
                        res)


# ---------------------------------------------------------------------------
# targeting


def fit_offset_logistic(y: NDArray, offset: NDArray, h: NDArray, max_iter: int = 100,
                        tol: float = 1e-12) -> float:
    """Maximum-likelihood ``eps`` in ``logit P(Y=1) = offset + eps * h``.

    ``y`` may be fractional in [0, 1] (quasi-binomial). Newton's method with
    step halving on the log-likelihood.
    """
    y = np.asarray(y, dtype=float)
    offset = np.asarray(offset, dtype=float)
    h = np.asarray(h, dtype=float)
    if y.size == 0 or not np.any(h != 0.0):
        return 0.0

    def loglik(e: float) -> float:
        eta = offset + e * h
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    eps = 0.0
    ll = loglik(eps)
    for _ in range(max_iter):
        p = expit(offset + eps * h)
        score = float(np.sum(h * (y - p)))
        info = float(np.sum(h * h * p * (1.0 - p)))
        if info <= 0.0 or not math.isfinite(info):
            break
        step = score / info
        t = 1.0
        while t > 1e-10:
            cand = eps + t * step
            cand_ll = loglik(cand)
            if cand_ll >= ll - 1e-14 * abs(ll):
                break
            t *= 0.5
        else:
            break
        eps, ll = cand, cand_ll
        if abs(t * step) < tol * max(1.0, abs(eps)):
            break
    return eps


def _logit(p: NDArray) -> NDArray:
    return logit(np.clip(p, _PROB_FLOOR, 1.0 - _PROB_FLOOR))


def _tilt(p: NDArray, eps: float, h: NDArray) -> NDArray:
    if eps == 0.0:
        return p
    return expit(_logit(p) + eps * h)


def _at_mk(mk: NDArray, p1: NDArray) -> NDArray:
    return np.where(mk == 1.0, p1, 1.0 - p1)


def _tolerance(eif: EifTable) -> float:
    n = eif.n
    return max(_se(eif.total) / (math.sqrt(n) * math.log(n)), 1e-8)


def _target_mediator_shift(cf: CrossFit, target_v: bool, max_iter: int) -> TmlFluctuation:
    arms = cf.estimand.arms
    y = cf.y
    # scores are evaluated on the outcome scale being targeted
    scaled = cf.table.with_outcome(y)
    mk = cf.block("Mk")[:, 0]
    prime, star = cf.is_prime, cf.is_star
    eif_fn = eif_for(cf.estimand.kind)
    fl = TmlFluctuation()
    constant_y = bool(np.all(y == y[0]))
    for it in range(1, max_iter + 1):
        if not constant_y:
            ns = cf.assemble()
            h_y = ns.q_star_obs / (ns.g * ns.r_obs)
            eps_y = fit_offset_logistic(y[prime], _logit(ns.b_obs[prime]), h_y[prime])
            for f in cf.folds:
                qs1, r1, g = f.q_star1, f.r1, f.g
                f.b_obs = _tilt(f.b_obs, eps_y, _at_mk(mk, qs1) / (g * _at_mk(mk, r1)))
                f.b1 = _tilt(f.b1, eps_y, qs1 / (g * r1))
                f.b0 = _tilt(f.b0, eps_y, (1.0 - qs1) / (g * (1.0 - r1)))
            fit_lmean(cf)
            fit_u(cf)

            ns = cf.assemble()
            h_mk = (ns.u1 - ns.u0) / ns.g_star
            eps_mk = fit_offset_logistic(mk[star], _logit(ns.q_star1[star]), h_mk[star])
            for f in cf.folds:
                f.q_star1 = _tilt(f.q_star1, eps_mk, (f.u1 - f.u0) / (1.0 - f.g))
            fit_s(cf)
            fit_v(cf)

            eps_w = 0.0
            if target_v and cf.has_z:
                ns = cf.assemble()
                eps_w = fit_offset_logistic(ns.s[prime], _logit(ns.v[prime]), 1.0 / ns.g[prime])
                for f in cf.folds:
                    f.v = _tilt(f.v, eps_w, 1.0 / f.g)
        else:
            eps_y = eps_mk = eps_w = 0.0
        fl.eps_y.append(eps_y)
        fl.eps_mk.append(eps_mk)
        fl.eps_w.append(eps_w)
        fl.iterations = it

        ns = cf.assemble()
        eif = eif_fn(scaled, ns, 0.0, False, arms)
        fl.tol = _tolerance(eif)
        fl.score_y = float(eif.d_y.mean())
        fl.score_mk = float(eif.d_mk.mean())
        if abs(fl.score_y) <= fl.tol and abs(fl.score_mk) <= fl.tol:
            fl.converged = True
            break
    return fl


def _target_joint_shift(cf: CrossFit, max_iter: int) -> TmlFluctuation:
    arms = cf.estimand.arms
    y = cf.y
    # scores are evaluated on the outcome scale being targeted
    scaled = cf.table.with_outcome(y)
    prime, star = cf.is_prime, cf.is_star
    fl = TmlFluctuation()
    constant_y = bool(np.all(y == y[0]))
    for it in range(1, max_iter + 1):
        eps_y = eps_w = 0.0
        if not constant_y:
            ns = cf.assemble()
            h_y = (1.0 - ns.pa) / (ns.pa * ns.g_star)
            eps_y = fit_offset_logistic(y[prime], _logit(ns.b_obs[prime]), h_y[prime])
            for f in cf.folds:
                f.b_obs = _tilt(f.b_obs, eps_y, (1.0 - f.pa) / (f.pa * (1.0 - f.g)))
            fit_u_star(cf)
            ns = cf.assemble()
            eps_w = fit_offset_logistic(ns.b_obs[star], _logit(ns.u_star[star]),
                                        1.0 / ns.g_star[star])
            for f in cf.folds:
                f.u_star = _tilt(f.u_star, eps_w, 1.0 / (1.0 - f.g))
        fl.eps_y.append(eps_y)
        fl.eps_w.append(eps_w)
        fl.iterations = it

        ns = cf.assemble()
        eif = eif_for("theta_all")(scaled, ns, 0.0, False, arms)
        fl.tol = _tolerance(eif)
        fl.score_y = float(eif.d_y.mean())
        fl.score_mk = float(eif.d_mk.mean())
        if abs(fl.score_y) <= fl.tol and abs(fl.score_mk) <= fl.tol:
            fl.converged = True
            break
    return fl


def _scaled_fit(cf: CrossFit) -> tuple[CrossFit, float, float]:
    """Copy of ``cf`` with the outcome on [0, 1]; refits when Y is not binary."""
    table = cf.table
    if table.y_is_binary:
        return copy.deepcopy(cf), 0.0, 1.0
    lo, hi = float(table.y.min()), float(table.y.max())
    span = hi - lo if hi > lo else 1.0
    y_scaled = (table.y - lo) / span
    scaled = fit_nuisances(table, cf.plan, cf.estimand, cf.stacks, cf.trunc, cf.shortcuts,
                           y_override=y_scaled)
    return scaled, lo, span


def tml_from_fit(cf: CrossFit, full: bool | None = None, max_iter: int = MAX_ITER,
                 seed: int | None = None) -> EstimateResult:
    """Targeted estimate starting from fitted nuisances (``cf`` itself is not modified).

    ``full=None`` chooses full targeting whenever ``L`` is empty (theta_k, and
    theta_k_prime that has no descendants) and partial targeting otherwise.
    """
    table, kind = cf.table, cf.estimand.kind
    work, lo, span = _scaled_fit(cf)
    if work.kind == "joint_shift":
        fl = _target_joint_shift(work, max_iter)
    else:
        if full is None:
            full = not work.has_l
        if full and work.has_l:
            raise ConfigError("full targeting requires an empty L block")
        fl = _target_mediator_shift(work, full, max_iter)
    ns = work.assemble()
    eif_fn = eif_for(kind)
    raw = eif_fn(table.with_outcome(work.y), ns, 0.0, False, cf.estimand.arms)
    if work.kind == "joint_shift":
        theta_s = float(ns.u_star.mean())
    else:
        theta_s = float((raw.d_z + raw.d_l + ns.v).mean())
    eif_s = eif_fn(table.with_outcome(work.y), ns, theta_s, False, cf.estimand.arms)
    eif = EifTable(*(span * getattr(eif_s, c) for c in ("d_y", "d_z", "d_mk", "d_l", "d_w")))
    theta = lo + span * theta_s
    diag = _diagnostics(work, eif)
    diag["tml_iterations"] = fl.iterations
    diag["tml"] = fl.to_dict()
    diag["tml_mode"] = ("joint" if work.kind == "joint_shift" else
                        ("full" if full else "partial"))
    if not fl.converged:
        warnings.warn(f"targeting did not converge in {max_iter} iterations", stacklevel=2)
    return EstimateResult(kind, "tml", theta, _se(eif.total), table.n, cf.plan.J, seed,
                          converged=fl.converged, diagnostics=diag,
                          flags=_flags(table, theta), eif=eif)


def partial_tml_theta_k_prime(table: ObservationTable, plan: CrossFitPlan,
                              estimand: EstimandSpec, stacks: LearnerStacks | None = None,
                              trunc: float = DEFAULT_TRUNC, max_iter: int = MAX_ITER
                              ) -> EstimateResult:
    """Target ``b`` and ``q(.|a*,w)`` only; theta from ``d_z + d_l + v``."""
    if estimand.kind != "theta_k_prime":
        raise ConfigError("partial targeting is defined for theta_k_prime")
    cf = fit_nuisances(table, plan, estimand, stacks, trunc)
    res = tml_from_fit(cf, full=False, max_iter=max_iter, seed=plan.seed)
    return assemble_iie(total_effect(table, plan, estimand.arms, stabilize=False, cf=cf), res)


def full_tml(table: ObservationTable, plan: CrossFitPlan, estimand: EstimandSpec,
             stacks: LearnerStacks | None = None, trunc: float = DEFAULT_TRUNC,
             max_iter: int = MAX_ITER) -> EstimateResult:
    """Target every component (theta_k, or theta_all); theta from the targeted plug-in."""
    if estimand.kind not in ("theta_k", "theta_all"):
        raise ConfigError("full targeting is defined for theta_k and theta_all")
    cf = fit_nuisances(table, plan, estimand, stacks, trunc)
    res = tml_from_fit(cf, full=True, max_iter=max_iter, seed=plan.seed)
    return assemble_iie(total_effect(table, plan, estimand.arms, stabilize=False, cf=cf), res)


def tml(table: ObservationTable, plan: CrossFitPlan, estimand: EstimandSpec,
        stacks: LearnerStacks | None = None, trunc: float = DEFAULT_TRUNC,
        max_iter: int = MAX_ITER) -> EstimateResult:
    cf = fit_nuisances(table, plan, estimand, stacks, trunc)
    res = tml_from_fit(cf, max_iter=max_iter, seed=plan.seed)
    return assemble_iie(total_effect(table, plan, estimand.arms, stabilize=False, cf=cf), res)


# ---------------------------------------------------------------------------
# shared pipeline and replication


ESTIMATORS = ("one_step", "tml")


def estimate(table: ObservationTable, plan: CrossFitPlan, estimand: EstimandSpec,
             stacks: LearnerStacks | None = None, estimators: Sequence[str] = ESTIMATORS,
             stabilize: bool = True, trunc: float = DEFAULT_TRUNC,
             max_iter: int = MAX_ITER) -> dict[str, EstimateResult]:
    """Run the requested estimators on one fold plan, sharing the nuisance fits."""
    for name in estimators:
        if name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {name!r}")
    cf = fit_nuisances(table, plan, estimand, stacks, trunc)
    out: dict[str, EstimateResult] = {}
    for name in estimators:
        if name == "one_step":
            res = one_step_from_fit(cf, stabilize, plan.seed)
            tot = total_effect(table, plan, estimand.arms, stabilize=stabilize, cf=cf)
        else:
            res = tml_from_fit(cf, max_iter=max_iter, seed=plan.seed)
            tot = total_effect(table, plan, estimand.arms, stabilize=False, cf=cf)
        out[name] = assemble_iie(tot, res)
    return out


def aggregate(results: Sequence[EstimateResult], y_binary: bool) -> EstimateResult:
    """Mean of points and mean of variances over retained replicates.

    Replicates that did not converge, or (binary outcome) whose IIE lies
    outside [-1, 1], are excluded and listed.
    """
    if not results:
        raise ConfigError("replicate needs at least one seed")
    kept, excluded = [], []
    for r in results:
        reasons = []
        if not r.converged:
            reasons.append("not_converged")
        if y_binary and not abs(r.iie) <= 1.0:
            reasons.append("extreme_iie")
        if reasons:
            excluded.append({"seed": r.seed, "reasons": reasons})
        else:
            kept.append(r)
    if not kept:
        raise EstimationError("all replicates were excluded")
    first = kept[0]

    def mean(attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in kept]))

    def pooled_se(attr: str) -> float:
        return float(math.sqrt(np.mean([getattr(r, attr) ** 2 for r in kept])))

    thetas = np.array([r.theta for r in kept])
    iies = np.array([r.iie for r in kept])
    diag = {
        "replicates": len(results),
        "retained": len(kept),
        "between_seed_sd_theta": float(thetas.std(ddof=1)) if len(kept) > 1 else 0.0,
        "between_seed_sd_iie": float(iies.std(ddof=1)) if len(kept) > 1 else 0.0,
        "tml_iterations": [r.diagnostics.get("tml_iterations", 0) for r in kept],
    }
    theta = mean("theta") if len(kept) > 1 else first.theta
    res = EstimateResult(
        first.estimand, first.estimator, theta,
        pooled_se("se_theta") if len(kept) > 1 else first.se_theta,
        first.n, first.folds, None if len(results) > 1 else first.seed, converged=True,
        iie=mean("iie") if len(kept) > 1 else first.iie,
        se_iie=pooled_se("se_iie") if len(kept) > 1 else first.se_iie,
        total=mean("total") if len(kept) > 1 else first.total,
        se_total=pooled_se("se_total") if len(kept) > 1 else first.se_total,
        excluded_replicates=excluded, diagnostics=diag,
    )
    res.flags = [f for r in kept for f in r.flags][:1]
    return res


def replicate(table: ObservationTable, estimand: EstimandSpec, seeds: Sequence[int], J: int,
              stacks: LearnerStacks | None = None, estimators: Sequence[str] = ESTIMATORS,
              stabilize: bool = True, trunc: float = DEFAULT_TRUNC,
              stratified: bool | None = None,
              runner: Callable[..., dict[str, EstimateResult]] | None = None,
              ) -> dict[str, tuple[EstimateResult, list[EstimateResult]]]:
    """Repeat the pipeline over fold seeds; per estimator the aggregate and per-seed results."""
    if len(seeds) < 1:
        raise ConfigError("replicate needs at least one seed")
    runner = runner or estimate
    per: dict[str, list[EstimateResult]] = {e: [] for e in estimators}
    for seed in seeds:
        plan = partition_folds(table, J, int(seed), stratified=stratified)
        for name, res in runner(table, plan, estimand, stacks, estimators, stabilize,
                                trunc).items():
            per[name].append(res)
    return {name: (aggregate(rs, table.y_is_binary), rs) for name, rs in per.items()}


__all__ = [
    "Z95", "TABLE_COLUMNS", "EstimateResult", "TmlFluctuation", "TotalEffect", "wald_ci",
    "render_table", "total_effect", "assemble_iie", "one_step", "one_step_from_fit",
    "fit_offset_logistic", "tml_from_fit", "partial_tml_theta_k_prime", "full_tml", "tml",
    "estimate", "aggregate", "replicate",
]
