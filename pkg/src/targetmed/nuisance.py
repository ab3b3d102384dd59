"""Cross-fitted nuisance functions.

Each outer fold keeps the predictions of its models at *all* rows: training
rows feed the repeated-regression pseudo-outcomes (so everything for fold
``l`` is trained on ``U_l^C`` only) and held-out rows feed the influence
function. The targeting step in :mod:`targetmed.estimators` updates these
arrays in place and calls the ``fit_*`` functions again.

Notation: ``b`` outcome regression, ``g`` propensity P(A=a'|w), ``q``
P(M_k=1|a,w), ``r`` P(M_k=1|a',z,w), ``s``/``u``/``v`` the sequential
regressions and ``lmean`` the L-marginalised outcome mean. All regressions
that condition on the exposure are fitted separately within each arm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .data import (
    DEFAULT_TRUNC,
    ConfigError,
    CrossFitPlan,
    EstimandSpec,
    EstimationError,
    MediatorPartition,
    ObservationTable,
)
from .learners import LearnerSpec, fit_super_learner, learner_from_config

NUISANCE_NAMES = ("g", "q", "r", "b", "s", "u", "v", "lmean", "pa", "u_star", "Q")


# ---------------------------------------------------------------------------
# learner stacks


@dataclass(frozen=True)
class LearnerStacks:
    """Candidate templates per nuisance; ``default`` covers any name not listed."""

    default: tuple[Mapping[str, Any], ...] = ({"kind": "glm"},)
    overrides: Mapping[str, tuple[Mapping[str, Any], ...]] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any] | Sequence | None) -> "LearnerStacks":
        if cfg is None:
            return cls()
        if isinstance(cfg, (list, tuple)):
            cfg = {"default": cfg}
        cfg = dict(cfg)
        default = tuple(cfg.pop("default", ({"kind": "glm"},)))
        for name in cfg:
            if name not in NUISANCE_NAMES:
                raise ConfigError(f"unknown nuisance {name!r} in learner config")
        stacks = cls(default=default, overrides={k: tuple(v) for k, v in cfg.items()})
        for name in NUISANCE_NAMES:
            stacks.specs(name, "gaussian")
        return stacks

    def specs(self, name: str, family: str) -> list[LearnerSpec]:
        entries = self.overrides.get(name, self.default)
        if not entries:
            raise ConfigError(f"empty learner stack for {name!r}")
        return [learner_from_config(e, family) for e in entries]


def _fit_predict(
    stacks: LearnerStacks,
    name: str,
    family: str,
    X: NDArray,
    y: NDArray,
    inner: NDArray | None,
    evals: Sequence[NDArray],
    trunc: float,
) -> tuple[list[NDArray], bool]:
    """Fit the stack for ``name`` and predict at each matrix in ``evals``.

    Binomial fits with a single outcome class fall back to an intercept model.
    """
    specs = stacks.specs(name, family)
    if y.size == 0:
        raise ConfigError(f"no training rows available for nuisance {name!r}")
    if family == "binomial" and np.all(y == y[0]):
        warnings.warn(f"single outcome class when fitting {name!r}; using intercept only",
                      stacklevel=3)
    _, model = fit_super_learner(specs, X, y, inner, trunc_bound=0.0)
    preds = [model.predict(E) for E in evals]
    return preds, model.converged


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class PseudoOutcome:
    values: NDArray
    recipe: str

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ConfigError(f"non-finite pseudo-outcome ({self.recipe})")


@dataclass
class FoldFit:
    """Predictions of the models trained without fold ``fold``, at every row."""

    fold: int
    train: NDArray
    g_raw: NDArray | None = None
    g: NDArray | None = None
    q_prime1: NDArray | None = None
    q_star1: NDArray | None = None
    r_raw: NDArray | None = None
    r1: NDArray | None = None
    b_obs: NDArray | None = None
    b1: NDArray | None = None
    b0: NDArray | None = None
    lmean1: NDArray | None = None
    lmean0: NDArray | None = None
    s: NDArray | None = None
    u1: NDArray | None = None
    u0: NDArray | None = None
    v: NDArray | None = None
    pa: NDArray | None = None
    u_star: NDArray | None = None
    Q: NDArray | None = None
    converged: bool = True


@dataclass(frozen=True)
class NuisanceSet:
    """Per-row cross-fitted nuisance values (each row from its own fold's models).

    ``kind`` is ``"mediator_shift"`` (theta_k_prime / theta_k, and theta_all
    with one mediator) or ``"joint_shift"`` (theta_all with several
    mediators, weighted through P(A=a'|m,w) in ``pa``).
    """

    kind: str
    mk: NDArray | None
    g: NDArray
    g_raw: NDArray
    fold: NDArray
    q_star1: NDArray | None = None
    q_prime1: NDArray | None = None
    r1: NDArray | None = None
    r_raw: NDArray | None = None
    b_obs: NDArray | None = None
    b1: NDArray | None = None
    b0: NDArray | None = None
    s: NDArray | None = None
    u1: NDArray | None = None
    u0: NDArray | None = None
    v: NDArray | None = None
    lmean1: NDArray | None = None
    lmean0: NDArray | None = None
    pa: NDArray | None = None
    u_star: NDArray | None = None
    Q: NDArray | None = None

    def __post_init__(self) -> None:
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, np.ndarray):
                arr = np.array(val, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, f.name, arr)

    @property
    def n(self) -> int:
        return int(self.g.shape[0])

    @property
    def g_star(self) -> NDArray:
        return 1.0 - self.g

    def _at_mk(self, p1: NDArray) -> NDArray:
        return np.where(self.mk == 1.0, p1, 1.0 - p1)

    @property
    def q_star_obs(self) -> NDArray:
        return self._at_mk(self.q_star1)

    @property
    def q_prime_obs(self) -> NDArray:
        return self._at_mk(self.q_prime1)

    @property
    def r_obs(self) -> NDArray:
        return self._at_mk(self.r1)

    @property
    def lmean_obs(self) -> NDArray:
        return np.where(self.mk == 1.0, self.lmean1, self.lmean0)

    @property
    def e_obs(self) -> NDArray:
        return density_ratio(self.q_prime_obs, self.r_obs)

    def require(self, *names: str) -> None:
        for name in names:
            val = getattr(self, name)
            if val is None:
                raise EstimationError(f"nuisance component {name!r} is missing")
            bad = np.flatnonzero(~np.isfinite(val))
            if bad.size:
                raise EstimationError(
                    f"nuisance component {name!r} is not finite at row {int(bad[0])}"
                )


def density_ratio(q_val, r_val):
    """``e = q(m_k|a,w) / r(m_k|a,z,w)`` (equivalently p(z|a,w) / p(z|a,m_k,w))."""
    return np.asarray(q_val, dtype=float) / np.asarray(r_val, dtype=float)


# ---------------------------------------------------------------------------
# the cross-fit object


@dataclass
class CrossFit:
    """Mutable working state for one estimand on one fold plan."""

    table: ObservationTable
    plan: CrossFitPlan
    estimand: EstimandSpec
    partition: MediatorPartition | None
    stacks: LearnerStacks
    trunc: float
    folds: list[FoldFit]
    shortcuts: bool = True
    y_override: NDArray | None = None
    recipes: list[str] = field(default_factory=list)

    @property
    def y(self) -> NDArray:
        return self.table.y if self.y_override is None else self.y_override

    @property
    def y_binary(self) -> bool:
        y = self.y
        return bool(np.all((y == 0.0) | (y == 1.0)))

    @property
    def bounded_outcome(self) -> bool:
        """Outcome on [0, 1] (binary, or rescaled for targeting)."""
        return self.y_binary or self.y_override is not None

    @property
    def kind(self) -> str:
        return "mediator_shift" if self.partition is not None else "joint_shift"

    @property
    def is_prime(self) -> NDArray:
        return self.table.a == self.estimand.arms.a_prime

    @property
    def is_star(self) -> NDArray:
        return self.table.a == self.estimand.arms.a_star

    # design blocks -------------------------------------------------------
    def block(self, name: str) -> NDArray:
        t, p = self.table, self.partition
        if name == "W":
            return t.w
        if name == "M":
            return t.mediators
        if name == "Mk":
            return t.mediators[:, [p.k_index]]
        if name == "Z":
            return t.mediators[:, list(p.z_indices)]
        if name == "L":
            return t.mediators[:, list(p.l_indices)]
        raise KeyError(name)

    def design(self, *names: str, mk: float | None = None) -> NDArray:
        parts = []
        for name in names:
            blk = self.block(name)
            if name == "Mk" and mk is not None:
                blk = np.full_like(blk, mk)
            parts.append(blk)
        return np.hstack(parts) if parts else np.zeros((self.table.n, 0))

    def inner(self, rows: NDArray) -> NDArray | None:
        if self.plan.inner_assignments is None:
            return None
        return self.plan.inner_assignments[rows]

    def clip(self, p: NDArray) -> NDArray:
        return np.clip(p, self.trunc, 1.0 - self.trunc)

    def clip_outcome(self, x: NDArray) -> NDArray:
        return np.clip(x, 0.0, 1.0) if self.bounded_outcome else x

    def fit(self, name: str, family: str, X: NDArray, y: NDArray, rows: NDArray,
            evals: Sequence[NDArray], fold: FoldFit) -> list[NDArray]:
        preds, conv = _fit_predict(self.stacks, name, family, X[rows], y[rows],
                                   self.inner(rows), [E for E in evals], self.trunc)
        fold.converged = fold.converged and conv
        return preds

    @property
    def has_z(self) -> bool:
        return bool(self.partition.z_indices)

    @property
    def has_l(self) -> bool:
        return bool(self.partition.l_indices)

    def assemble(self) -> NuisanceSet:
        """Row ``i`` takes every value from the fold that held ``i`` out."""
        labels = self.plan.assignments
        n = self.table.n

        def pick(attr: str) -> NDArray | None:
            first = getattr(self.folds[0], attr)
            if first is None:
                return None
            out = np.empty(n)
            for f in self.folds:
                held = labels == f.fold
                out[held] = getattr(f, attr)[held]
            return out

        common = dict(g=pick("g"), g_raw=pick("g_raw"), fold=labels.astype(float), Q=pick("Q"))
        if self.kind == "joint_shift":
            return NuisanceSet(kind="joint_shift", mk=None, pa=pick("pa"),
                               u_star=pick("u_star"), b_obs=pick("b_obs"), **common)
        names = ("q_star1", "q_prime1", "r1", "r_raw", "b_obs", "b1", "b0", "s", "u1", "u0",
                 "v", "lmean1", "lmean0")
        return NuisanceSet(kind="mediator_shift",
                           mk=self.table.mediators[:, self.partition.k_index],
                           **{k: pick(k) for k in names}, **common)

    @property
    def converged(self) -> bool:
        return all(f.converged for f in self.folds)


# ---------------------------------------------------------------------------
# primary nuisances


def fit_primary_nuisances(
    table: ObservationTable,
    plan: CrossFitPlan,
    estimand: EstimandSpec,
    stacks: LearnerStacks | None = None,
    trunc: float = DEFAULT_TRUNC,
    shortcuts: bool = True,
    y_override: NDArray | None = None,
) -> CrossFit:
    """Fit ``g``, ``q``, ``r`` and ``b`` (or ``P(A|M,W)`` for the joint shift) per fold."""
    stacks = stacks or LearnerStacks()
    partition = estimand.bind(table)
    if plan.n != table.n:
        raise ConfigError("fold plan does not match the table")
    if table.n < 2 * plan.J:
        raise ConfigError(f"n={table.n} is smaller than 2*J={2 * plan.J}")
    arms = estimand.arms
    for arm, label in ((arms.a_prime, "a_prime"), (arms.a_star, "a_star")):
        if int((table.a == arm).sum()) < 2:
            raise ConfigError(f"fewer than 2 rows in arm {label}")
    cf = CrossFit(table, plan, estimand, partition, stacks, trunc,
                  [FoldFit(fold=j, train=plan.assignments != j) for j in range(plan.J)],
                  shortcuts=shortcuts, y_override=y_override)
    y = cf.y
    y_family = "binomial" if cf.bounded_outcome else "gaussian"
    prime, star = cf.is_prime, cf.is_star
    W = cf.design("W")
    a_ind = prime.astype(float)

    for f in cf.folds:
        tr = f.train
        (g_raw,) = cf.fit("g", "binomial", W, a_ind, tr, [W], f)
        f.g_raw, f.g = g_raw, cf.clip(g_raw)
        tr_p, tr_s = tr & prime, tr & star
        (Q,) = cf.fit("Q", y_family, W, y, tr_p, [W], f)
        f.Q = Q

        if cf.kind == "joint_shift":
            XM = cf.design("M", "W")
            (pa,) = cf.fit("pa", "binomial", XM, a_ind, tr, [XM], f)
            f.pa = cf.clip(pa)
            (b,) = cf.fit("b", y_family, XM, y, tr_p, [XM], f)
            f.b_obs = b
            continue

        mk = cf.block("Mk")[:, 0]
        (qp,) = cf.fit("q", "binomial", W, mk, tr_p, [W], f)
        (qs,) = cf.fit("q", "binomial", W, mk, tr_s, [W], f)
        f.q_prime1, f.q_star1 = cf.clip(qp), cf.clip(qs)
        if cf.has_z:
            XZ = cf.design("Z", "W")
            (r_raw,) = cf.fit("r", "binomial", XZ, mk, tr_p, [XZ], f)
        else:
            r_raw = qp
        f.r_raw, f.r1 = r_raw, cf.clip(r_raw)
        blocks = ("Mk", "Z", "L", "W")
        Xb = cf.design(*blocks)
        b_obs, b1, b0 = cf.fit("b", y_family, Xb, y, tr_p,
                               [Xb, cf.design(*blocks, mk=1.0), cf.design(*blocks, mk=0.0)], f)
        f.b_obs, f.b1, f.b0 = b_obs, b1, b0
    return cf


# ---------------------------------------------------------------------------
# repeated regressions


def _pseudo_regress(cf: CrossFit, name: str, f: FoldFit, pseudo: PseudoOutcome,
                    rows: NDArray, X: NDArray, evals: Sequence[NDArray]) -> list[NDArray]:
    cf.recipes.append(pseudo.recipe)
    preds = cf.fit(name, "gaussian", X, pseudo.values, rows, evals, f)
    return [cf.clip_outcome(p) for p in preds]


def _at_mk(mk: NDArray, p1: NDArray) -> NDArray:
    return np.where(mk == 1.0, p1, 1.0 - p1)


def _constant_b(f: FoldFit) -> float | None:
    """Common value of the outcome regression when it is flat (e.g. Y constant).

    Every sequential regression of a constant ``b`` equals that constant, so it
    is returned exactly instead of being re-estimated with noise from the
    density-ratio weights.
    """
    vals = [f.b_obs] + [x for x in (f.b1, f.b0) if x is not None]
    c = vals[0][0]
    if all(np.all(x == c) for x in vals):
        return float(c)
    return None


def fit_lmean(cf: CrossFit) -> None:
    """E(b | A=a', Z, M_k, W) at both values of M_k; equal to ``b`` when L is empty."""
    for f in cf.folds:
        c = _constant_b(f)
        if (not cf.has_l and cf.shortcuts) or c is not None:
            f.lmean1, f.lmean0 = f.b1.copy(), f.b0.copy()
            continue
        rows = f.train & cf.is_prime
        X = cf.design("Mk", "Z", "W")
        pseudo = PseudoOutcome(f.b_obs, "b")
        f.lmean1, f.lmean0 = _pseudo_regress(
            cf, "lmean", f, pseudo, rows, X,
            [cf.design("Mk", "Z", "W", mk=1.0), cf.design("Mk", "Z", "W", mk=0.0)])


def fit_u(cf: CrossFit) -> None:
    """u(a', m_k, w) = E(b * e | A=a', M_k=m_k, W=w) at m_k = 1 and 0.

    With ``Z`` empty the density ratio is identically one and ``u`` is the
    L-marginalised outcome mean (``fit_lmean`` must have run).
    """
    mk = cf.block("Mk")[:, 0]
    for f in cf.folds:
        if (not cf.has_z and cf.shortcuts) or _constant_b(f) is not None:
            f.u1, f.u0 = f.lmean1.copy(), f.lmean0.copy()
            continue
        rows = f.train & cf.is_prime
        e = density_ratio(_at_mk(mk, f.q_prime1), _at_mk(mk, f.r1))
        pseudo = PseudoOutcome(f.b_obs * e, "b*q(mk|a',w)/r(mk|a',z,w)")
        X = cf.design("Mk", "W")
        f.u1, f.u0 = _pseudo_regress(cf, "u", f, pseudo, rows, X,
                                     [cf.design("Mk", "W", mk=1.0), cf.design("Mk", "W", mk=0.0)])


def fit_s(cf: CrossFit) -> None:
    """s(a', z, w) = E(b * q(m_k|a*,w) / r(m_k|a',z,w) | A=a', Z=z, W=w).

    With ``L`` empty this is the closed form ``sum_mk b(mk) q(mk|a*,w)``.
    """
    mk = cf.block("Mk")[:, 0]
    for f in cf.folds:
        c = _constant_b(f)
        if c is not None:
            f.s = np.full(cf.table.n, c)
            continue
        if not cf.has_l and cf.shortcuts:
            f.s = f.b1 * f.q_star1 + f.b0 * (1.0 - f.q_star1)
            continue
        rows = f.train & cf.is_prime
        ratio = _at_mk(mk, f.q_star1) / _at_mk(mk, f.r1)
        pseudo = PseudoOutcome(f.b_obs * ratio, "b*q(mk|a*,w)/r(mk|a',z,w)")
        X = cf.design("Z", "W")
        (f.s,) = _pseudo_regress(cf, "s", f, pseudo, rows, X, [X])


def fit_v(cf: CrossFit) -> None:
    """v(a', w) = E(b * q(m_k|a*,w) / r(m_k|a',z,w) | A=a', W=w).

    With ``Z`` empty this is ``sum_mk u(a', mk, w) q(mk|a*,w)`` (``fit_u`` first).
    """
    mk = cf.block("Mk")[:, 0]
    for f in cf.folds:
        c = _constant_b(f)
        if c is not None:
            f.v = np.full(cf.table.n, c)
            continue
        if not cf.has_z and cf.shortcuts:
            f.v = f.u1 * f.q_star1 + f.u0 * (1.0 - f.q_star1)
            continue
        rows = f.train & cf.is_prime
        ratio = _at_mk(mk, f.q_star1) / _at_mk(mk, f.r1)
        pseudo = PseudoOutcome(f.b_obs * ratio, "b*q(mk|a*,w)/r(mk|a',z,w)")
        W = cf.design("W")
        (f.v,) = _pseudo_regress(cf, "v", f, pseudo, rows, W, [W])


def fit_u_star(cf: CrossFit) -> None:
    """u(a*, w) = E(b(a', M, W) | A=a*, W=w) for the joint mediator shift."""
    for f in cf.folds:
        c = _constant_b(f)
        if c is not None:
            f.u_star = np.full(cf.table.n, c)
            continue
        rows = f.train & cf.is_star
        W = cf.design("W")
        (f.u_star,) = _pseudo_regress(cf, "u_star", f, PseudoOutcome(f.b_obs, "b(a',m,w)"),
                                      rows, W, [W])


def fit_derived(cf: CrossFit) -> None:
    if cf.kind == "joint_shift":
        fit_u_star(cf)
        return
    fit_lmean(cf)
    fit_u(cf)
    fit_s(cf)
    fit_v(cf)


def fit_nuisances(
    table: ObservationTable,
    plan: CrossFitPlan,
    estimand: EstimandSpec,
    stacks: LearnerStacks | None = None,
    trunc: float = DEFAULT_TRUNC,
    shortcuts: bool = True,
    y_override: NDArray | None = None,
) -> CrossFit:
    cf = fit_primary_nuisances(table, plan, estimand, stacks, trunc, shortcuts, y_override)
    fit_derived(cf)
    return cf
