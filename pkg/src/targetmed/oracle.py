"""Exact evaluation by enumeration over small discrete laws.

A :class:`DiscreteLaw` is stored factorized in mediator order,
``p(w) g(a|w) prod_j p(m_j | a, m_<j, w) p(y | a, m, w)``, with every
variable binary except ``W`` (at most four support points). Each quantity
used by the estimators (identification formulas, nuisance functions,
influence-function moments) is computed here by summation.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .data import (
    ArmSpec,
    ConfigError,
    EstimandSpec,
    MediatorPartition,
    ObservationTable,
)
from .eif import eif_for
from .nuisance import NuisanceSet

FIXTURE_DIR = Path(__file__).parent / "fixtures"
CANONICAL_LAW = FIXTURE_DIR / "canonical_law.json"
MAX_W_POINTS = 4
MAX_MEDIATORS = 5
POSITIVITY_FLOOR = 0.01


@dataclass(frozen=True)
class DiscreteLaw:
    """Factorized law of ``(W, A, M_1..M_K, Y)`` with binary ``A``, ``M`` and ``Y``.

    Attributes
    ----------
    w_values : (nw, p) support points of the confounders.
    p_w : (nw,) marginal pmf of ``W``.
    p_a1 : (nw,) ``P(A=1 | w)``.
    mediator_p1 : list of arrays; entry ``j`` has shape ``(nw, 2) + (2,)*j`` and
        holds ``P(M_j=1 | w, a, m_1..m_{j-1})``.
    y_p1 : (nw, 2) + (2,)*K array of ``P(Y=1 | w, a, m)``.
    """

    w_values: NDArray
    p_w: NDArray
    p_a1: NDArray
    mediator_p1: tuple[NDArray, ...]
    y_p1: NDArray
    w_names: tuple[str, ...] = ()
    mediator_names: tuple[str, ...] = ()
    allow_positivity_violation: bool = False

    def __post_init__(self) -> None:
        w_values = np.atleast_2d(np.asarray(self.w_values, dtype=float))
        if w_values.shape[0] == 1 and np.asarray(self.p_w).size != 1:
            w_values = w_values.T
        object.__setattr__(self, "w_values", w_values)
        for name in ("p_w", "p_a1", "y_p1"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        meds = tuple(np.asarray(m, dtype=float) for m in self.mediator_p1)
        object.__setattr__(self, "mediator_p1", meds)
        nw, K = w_values.shape[0], len(meds)
        if not self.w_names:
            object.__setattr__(self, "w_names", tuple(f"w{i + 1}" for i in range(w_values.shape[1])))
        if not self.mediator_names:
            object.__setattr__(self, "mediator_names", tuple(f"m{j + 1}" for j in range(K)))
        self._validate(nw, K)

    def _validate(self, nw: int, K: int) -> None:
        if not 1 <= nw <= MAX_W_POINTS:
            raise ConfigError(f"W must have between 1 and {MAX_W_POINTS} support points")
        if not 1 <= K <= MAX_MEDIATORS:
            raise ConfigError(f"need between 1 and {MAX_MEDIATORS} mediators")
        if len(self.w_names) != self.w_values.shape[1] or len(self.mediator_names) != K:
            raise ConfigError("variable names do not match the supports")
        if len({tuple(r) for r in self.w_values}) != nw:
            raise ConfigError("W support points must be distinct")
        if self.p_w.shape != (nw,) or self.p_a1.shape != (nw,):
            raise ConfigError("p_w and p_a1 must have one entry per W support point")
        for j, m in enumerate(self.mediator_p1):
            if m.shape != (nw, 2) + (2,) * j:
                raise ConfigError(f"mediator table {j} has shape {m.shape}, "
                                  f"expected {(nw, 2) + (2,) * j}")
        if self.y_p1.shape != (nw, 2) + (2,) * K:
            raise ConfigError(f"outcome table has shape {self.y_p1.shape}")
        tables = [self.p_w, self.p_a1, self.y_p1, *self.mediator_p1]
        if any(np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1) for t in tables):
            raise ConfigError("probabilities must lie in [0, 1]")
        if abs(self.p_w.sum() - 1.0) > 1e-12:
            raise ConfigError("p_w must sum to one")
        if np.any(self.p_w <= 0):
            raise ConfigError("every W support point needs positive mass")
        if not self.allow_positivity_violation:
            probs = [self.p_a1, *self.mediator_p1]
            if any(np.any(t < POSITIVITY_FLOOR) or np.any(t > 1 - POSITIVITY_FLOOR)
                   for t in probs):
                raise ConfigError(f"exposure and mediator probabilities must lie in "
                                  f"[{POSITIVITY_FLOOR}, {1 - POSITIVITY_FLOOR}]")

    @property
    def K(self) -> int:
        return len(self.mediator_p1)

    @property
    def nw(self) -> int:
        return self.w_values.shape[0]

    def joint(self) -> NDArray:
        """Joint pmf with axes ``(w, a, m_1, ..., m_K, y)``."""
        K = self.K
        P = self.p_w[:, None] * np.stack([1.0 - self.p_a1, self.p_a1], axis=1)
        for j, m in enumerate(self.mediator_p1):
            cond = np.stack([1.0 - m, m], axis=-1)
            P = P[..., None] * cond
        y = np.stack([1.0 - self.y_p1, self.y_p1], axis=-1)
        P = P[..., None] * y
        assert P.shape == (self.nw, 2) + (2,) * K + (2,)
        return P

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "w_names": list(self.w_names),
            "w_values": self.w_values.tolist(),
            "p_w": self.p_w.tolist(),
            "p_a1": self.p_a1.tolist(),
            "mediator_names": list(self.mediator_names),
            "mediator_p1": [m.tolist() for m in self.mediator_p1],
            "y_p1": self.y_p1.tolist(),
            "allow_positivity_violation": self.allow_positivity_violation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteLaw":
        try:
            return cls(
                w_values=np.asarray(d["w_values"], dtype=float),
                p_w=d["p_w"],
                p_a1=d["p_a1"],
                mediator_p1=tuple(np.asarray(m, dtype=float) for m in d["mediator_p1"]),
                y_p1=d["y_p1"],
                w_names=tuple(d.get("w_names", ())),
                mediator_names=tuple(d.get("mediator_names", ())),
                allow_positivity_violation=bool(d.get("allow_positivity_violation", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed law document: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DiscreteLaw":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read law file {path}: {exc}") from exc
        return cls.from_dict(doc)

    def with_outcome(self, y_p1: NDArray) -> "DiscreteLaw":
        return replace(self, y_p1=np.broadcast_to(np.asarray(y_p1, dtype=float),
                                                  self.y_p1.shape).copy())


def canonical_law() -> DiscreteLaw:
    """The fixture law shipped with the package (one binary confounder, three mediators)."""
    return DiscreteLaw.load(CANONICAL_LAW)


# ---------------------------------------------------------------------------
# sampling


def sample(law: DiscreteLaw, n: int, seed: int) -> ObservationTable:
    """``n`` i.i.d. draws through the factorized conditionals."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = np.random.default_rng(seed)
    w_idx = rng.choice(law.nw, size=n, p=law.p_w)
    a = (rng.random(n) < law.p_a1[w_idx]).astype(int)
    meds = np.zeros((n, law.K), dtype=int)
    for j, table in enumerate(law.mediator_p1):
        p = table[(w_idx, a, *(meds[:, i] for i in range(j)))]
        meds[:, j] = rng.random(n) < p
    p_y = law.y_p1[(w_idx, a, *(meds[:, i] for i in range(law.K)))]
    y = (rng.random(n) < p_y).astype(float)
    return ObservationTable(
        y=y, a=a.astype(float), w=law.w_values[w_idx], mediators=meds.astype(float),
        w_names=law.w_names, mediator_names=law.mediator_names,
    )


# ---------------------------------------------------------------------------
# exact nuisance tables


def _arm_index(value: float) -> int:
    if value not in (0.0, 1.0):
        raise ConfigError("discrete laws code the exposure as 0/1")
    return int(value)


def _bits_index(bits: NDArray) -> NDArray:
    """Row-wise binary digits (first column most significant) to a flat index."""
    bits = np.asarray(bits, dtype=int)
    if bits.shape[1] == 0:
        return np.zeros(bits.shape[0], dtype=int)
    weights = 2 ** np.arange(bits.shape[1] - 1, -1, -1)
    return bits @ weights


def _partition_joint(law: DiscreteLaw, part: MediatorPartition) -> NDArray:
    """Joint pmf rearranged to ``(w, a, z, m_k, l, y)`` with flattened ``z`` and ``l``."""
    K = law.K
    part.validate(K)
    P = law.joint()
    used = set(part.z_indices) | {part.k_index} | set(part.l_indices)
    spare = [j for j in range(K) if j not in used]
    if spare:
        P = P.sum(axis=tuple(2 + j for j in spare), keepdims=True)
    order = [0, 1, *(2 + j for j in part.z_indices), 2 + part.k_index,
             *(2 + j for j in part.l_indices), *(2 + j for j in spare), 2 + K]
    P = P.transpose(order)
    nz, nl = 2 ** len(part.z_indices), 2 ** len(part.l_indices)
    return P.reshape(law.nw, 2, nz, 2, nl, 2)


@dataclass(frozen=True)
class ExactNuisances:
    """Exact nuisance tables, indexed by support cells.

    Mediator-shift tables use axes ``w``, ``z`` (flat), ``mk`` (0/1), ``l``
    (flat). Joint-shift tables use ``w`` and the flat index of ``m``.
    """

    kind: str
    partition: MediatorPartition | None
    arms: ArmSpec
    g: NDArray
    Q: NDArray
    q1: NDArray | None = None          # (2, nw): P(M_k=1 | a, w) by arm index
    r1: NDArray | None = None          # (nw, nz): P(M_k=1 | a', z, w)
    b: NDArray | None = None           # (nw, nz, 2, nl) or (nw, nm)
    lmean: NDArray | None = None       # (nw, nz, 2)
    s: NDArray | None = None           # (nw, nz)
    u: NDArray | None = None           # (nw, 2)
    v: NDArray | None = None           # (nw,)
    p_z: NDArray | None = None         # (nw, nz): p(z | a', w)
    p_z_mk: NDArray | None = None      # (nw, nz, 2): p(z | a', m_k, w)
    p_l: NDArray | None = None         # (nw, nz, 2, nl): p(l | a', z, m_k, w)
    r_true: NDArray | None = None      # truth for r, kept when r1 is replaced
    pa: NDArray | None = None          # (nw, nm): P(A=a' | m, w)
    u_star: NDArray | None = None      # (nw,)

    @property
    def q_prime1(self) -> NDArray:
        return self.q1[_arm_index(self.arms.a_prime)]

    @property
    def q_star1(self) -> NDArray:
        return self.q1[_arm_index(self.arms.a_star)]

    def at(self, table: ObservationTable, law: DiscreteLaw) -> NuisanceSet:
        """Evaluate the tables at the rows of ``table`` (rows must lie on the law's support)."""
        w_idx = _w_index(table, law)
        n = table.n
        common = dict(g=self.g[w_idx], g_raw=self.g[w_idx], fold=np.zeros(n), Q=self.Q[w_idx])
        if self.kind == "joint_shift":
            m_idx = _bits_index(table.mediators)
            return NuisanceSet(kind="joint_shift", mk=None, pa=self.pa[w_idx, m_idx],
                               b_obs=self.b[w_idx, m_idx], u_star=self.u_star[w_idx], **common)
        part = self.partition
        M = table.mediators
        z = _bits_index(M[:, list(part.z_indices)])
        l = _bits_index(M[:, list(part.l_indices)])
        mk = M[:, part.k_index].astype(int)
        return NuisanceSet(
            kind="mediator_shift", mk=M[:, part.k_index],
            q_star1=self.q_star1[w_idx], q_prime1=self.q_prime1[w_idx],
            r1=self.r1[w_idx, z], r_raw=self.r1[w_idx, z],
            b_obs=self.b[w_idx, z, mk, l], b1=self.b[w_idx, z, 1, l], b0=self.b[w_idx, z, 0, l],
            lmean1=self.lmean[w_idx, z, 1], lmean0=self.lmean[w_idx, z, 0],
            s=self.s[w_idx, z], u1=self.u[w_idx, 1], u0=self.u[w_idx, 0], v=self.v[w_idx],
            **common,
        )


def _w_index(table: ObservationTable, law: DiscreteLaw) -> NDArray:
    match = np.all(table.w[:, None, :] == law.w_values[None, :, :], axis=2)
    if not np.all(match.any(axis=1)):
        bad = int(np.flatnonzero(~match.any(axis=1))[0])
        raise ConfigError(f"row {bad} has a confounder value outside the law's support")
    return match.argmax(axis=1)


def exact_nuisances(law: DiscreteLaw, estimand: EstimandSpec) -> ExactNuisances:
    """All nuisance functions of ``estimand`` tabulated exactly by summation."""
    arms = estimand.arms
    ap, ast = _arm_index(arms.a_prime), _arm_index(arms.a_star)
    part = estimand.effective_partition(law.K)
    P = law.joint()
    p_wa = P.reshape(law.nw, 2, -1).sum(axis=2)
    p_w = p_wa.sum(axis=1)
    g = p_wa[:, ap] / p_w
    Q = P[:, ap].reshape(law.nw, -1, 2)[..., 1].sum(axis=1) / p_wa[:, ap]
    if part is None:
        Pm = P.sum(axis=-1).reshape(law.nw, 2, -1)           # (w, a, m)
        pa = Pm[:, ap] / Pm.sum(axis=1)
        b = P[:, ap].reshape(law.nw, -1, 2)[..., 1] / Pm[:, ap]
        pm_star = Pm[:, ast] / p_wa[:, ast, None]
        u_star = (b * pm_star).sum(axis=1)
        return ExactNuisances("joint_shift", None, arms, g=g, Q=Q, b=b, pa=pa, u_star=u_star)

    P6 = _partition_joint(law, part)                         # (w, a, z, mk, l, y)
    P_wazml = P6.sum(axis=5)
    P_wazm = P_wazml.sum(axis=4)
    P_waz = P_wazm.sum(axis=3)
    P_wam = P_wazm.sum(axis=2)
    q1 = np.stack([P_wam[:, a, 1] / p_wa[:, a] for a in (0, 1)])
    r1 = P_wazm[:, ap, :, 1] / P_waz[:, ap]
    b = P6[:, ap, ..., 1] / P_wazml[:, ap]
    p_l = P_wazml[:, ap] / P_wazm[:, ap, ..., None]
    p_z = P_waz[:, ap] / p_wa[:, ap, None]
    p_z_mk = P_wazm[:, ap] / P_wam[:, ap, None, :]
    lmean = (b * p_l).sum(axis=3)
    q_star = np.stack([1.0 - q1[ast], q1[ast]], axis=1)     # (w, mk)
    s = (lmean * q_star[:, None, :]).sum(axis=2)
    u = (lmean * p_z[:, :, None]).sum(axis=1)
    v = (u * q_star).sum(axis=1)
    return ExactNuisances("mediator_shift", part, arms, g=g, Q=Q, q1=q1, r1=r1, b=b,
                          lmean=lmean, s=s, u=u, v=v, p_z=p_z, p_z_mk=p_z_mk, p_l=p_l,
                          r_true=r1)


# ---------------------------------------------------------------------------
# identification formulas


def _theta_direct(law: DiscreteLaw, estimand: EstimandSpec) -> float:
    """Identification integral as one sum over the support."""
    arms = estimand.arms
    ap, ast = _arm_index(arms.a_prime), _arm_index(arms.a_star)
    part = estimand.effective_partition(law.K)
    P = law.joint()
    p_wa = P.reshape(law.nw, 2, -1).sum(axis=2)
    p_w = p_wa.sum(axis=1)
    if part is None:
        Pm = P.sum(axis=-1)
        b = P[:, ap, ..., 1] / Pm[:, ap]
        pm_star = Pm[:, ast] / p_wa[:, ast].reshape((-1,) + (1,) * law.K)
        return float(np.dot(p_w, (b * pm_star).reshape(law.nw, -1).sum(axis=1)))
    P6 = _partition_joint(law, part)
    denom_zml = P6.sum(axis=5)
    b = P6[:, ap, ..., 1] / denom_zml[:, ap]
    p_z = P6[:, ap].sum(axis=(2, 3, 4)) / p_wa[:, ap, None]
    q_star = P6[:, ast].sum(axis=(1, 3, 4)) / p_wa[:, ast, None]
    p_l = denom_zml[:, ap] / denom_zml[:, ap].sum(axis=3, keepdims=True)
    return float(np.einsum("w,wzml,wz,wm,wzml->", p_w, b, p_z, q_star, p_l))


def _theta_sequential(law: DiscreteLaw, estimand: EstimandSpec) -> float:
    """Identification integral as iterated conditional expectations."""
    arms = estimand.arms
    ap, ast = _arm_index(arms.a_prime), _arm_index(arms.a_star)
    part = estimand.effective_partition(law.K)
    if part is None:
        # backward recursion through the factorized conditionals under a*
        h = law.y_p1[:, ap]
        for j in range(law.K - 1, -1, -1):
            p1 = law.mediator_p1[j][:, ast]
            h = h[..., 1] * p1 + h[..., 0] * (1.0 - p1)
        return float(np.dot(law.p_w, h))
    P6 = _partition_joint(law, part)
    Pa = P6[:, ap]                                           # (w, z, mk, l, y)
    P_zm = Pa.sum(axis=(3, 4))
    lmean = Pa[..., 1].sum(axis=3) / P_zm                    # E(Y | a', z, mk, w)
    P_m = P_zm.sum(axis=1)                                   # (w, mk)
    p_z_given_mk = P_zm / P_m[:, None, :]
    q_prime = P_m / P_m.sum(axis=1, keepdims=True)
    r = P_zm / P_zm.sum(axis=2, keepdims=True)
    e = q_prime[:, None, :] / r                              # density ratio
    u = (lmean * e * p_z_given_mk).sum(axis=1)               # E(lmean * e | a', mk, w)
    Ps = P6[:, ast].sum(axis=(1, 3, 4))
    q_star = Ps / Ps.sum(axis=1, keepdims=True)
    v = (u * q_star).sum(axis=1)
    p_w = P6.sum(axis=(1, 2, 3, 4, 5))
    return float(np.dot(p_w, v))


def exact_theta(law: DiscreteLaw, estimand: EstimandSpec, method: str = "direct") -> float:
    """Interventional mean by enumeration (``method`` is ``direct`` or ``sequential``)."""
    if method == "direct":
        return _theta_direct(law, estimand)
    if method == "sequential":
        return _theta_sequential(law, estimand)
    raise ConfigError(f"unknown method {method!r}")


def exact_total(law: DiscreteLaw, arms: ArmSpec = ArmSpec()) -> float:
    """``E[Y_{a'}] = sum_w p(w) E(Y | a', w)``."""
    ap = _arm_index(arms.a_prime)
    P = law.joint()
    p_wa = P.reshape(law.nw, 2, -1).sum(axis=2)
    Q = P[:, ap].reshape(law.nw, -1, 2)[..., 1].sum(axis=1) / p_wa[:, ap]
    return float(np.dot(p_wa.sum(axis=1), Q))


def exact_iie(law: DiscreteLaw, estimand: EstimandSpec) -> float:
    return exact_total(law, estimand.arms) - exact_theta(law, estimand)


# ---------------------------------------------------------------------------
# influence-function moments


def support_table(law: DiscreteLaw) -> tuple[ObservationTable, NDArray]:
    """Every support cell as one row, with its probability."""
    P = law.joint()
    cells = list(itertools.product(range(law.nw), (0, 1), *([(0, 1)] * law.K), (0, 1)))
    idx = np.array(cells, dtype=int)
    prob = P[tuple(idx.T)]
    table = ObservationTable(
        y=idx[:, -1].astype(float), a=idx[:, 1].astype(float), w=law.w_values[idx[:, 0]],
        mediators=idx[:, 2:2 + law.K].astype(float), w_names=law.w_names,
        mediator_names=law.mediator_names,
    )
    return table, prob


def _support_eif(law: DiscreteLaw, estimand: EstimandSpec, nuisances: ExactNuisances | None,
                 theta_plugin: float | None):
    nuisances = nuisances or exact_nuisances(law, estimand)
    theta = exact_theta(law, estimand) if theta_plugin is None else theta_plugin
    table, prob = support_table(law)
    ns = nuisances.at(table, law)
    eif = eif_for(estimand.kind)(table, ns, theta, False, estimand.arms)
    return eif, prob


def exact_eif_mean(law: DiscreteLaw, estimand: EstimandSpec,
                   nuisances: ExactNuisances | None = None,
                   theta_plugin: float | None = None) -> float:
    """``E_P[D_{P_1}(O)]`` with nuisances ``P_1`` (truth by default) and the true theta.

    At the truth this is zero. With other nuisances it equals the asymptotic
    bias of the (unstabilised) one-step estimator.
    """
    eif, prob = _support_eif(law, estimand, nuisances, theta_plugin)
    return float(np.dot(prob, eif.total))


def exact_bias(law: DiscreteLaw, estimand: EstimandSpec, nuisances: ExactNuisances) -> float:
    """Limit of the one-step estimate minus theta when the nuisances converge to ``nuisances``."""
    return exact_eif_mean(law, estimand, nuisances)


def exact_eif_variance(law: DiscreteLaw, estimand: EstimandSpec) -> float:
    """``Var_P[D_P(O)]``, the nonparametric efficiency bound times ``n``."""
    eif, prob = _support_eif(law, estimand, None, None)
    total = eif.total
    mean = float(np.dot(prob, total))
    return float(np.dot(prob, (total - mean) ** 2))


def exact_iie_variance(law: DiscreteLaw, estimand: EstimandSpec) -> float:
    """Variance of the IIE influence function (total-effect EIF minus theta EIF)."""
    eif, prob = _support_eif(law, estimand, None, None)
    table, _ = support_table(law)
    ex = exact_nuisances(law, estimand)
    ns = ex.at(table, law)
    ind = (table.a == estimand.arms.a_prime).astype(float)
    psi = exact_total(law, estimand.arms)
    tot = ns.Q + ind / ns.g * (table.y - ns.Q) - psi
    diff = tot - eif.total
    return float(np.dot(prob, diff ** 2) - np.dot(prob, diff) ** 2)


def stabilization_mean(law: DiscreteLaw, estimand: EstimandSpec) -> float:
    """``E[1{a=a'}/g(a'|w) q(m_k|a*,w)/r(m_k|a',z,w)]`` (one at the truth)."""
    table, prob = support_table(law)
    ns = exact_nuisances(law, estimand).at(table, law)
    ind = (table.a == estimand.arms.a_prime).astype(float)
    return float(np.dot(prob, ind / ns.g * ns.q_star_obs / ns.r_obs))


@dataclass(frozen=True)
class OracleSummary:
    estimand: str
    theta: float
    theta_sequential: float
    total: float
    iie: float
    eif_mean: float
    eif_variance: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"estimand": self.estimand, "theta": self.theta,
                "theta_sequential": self.theta_sequential, "total": self.total,
                "iie": self.iie, "eif_mean": self.eif_mean, "eif_variance": self.eif_variance,
                **self.extras}


def summarize(law: DiscreteLaw, estimands: Sequence[EstimandSpec]) -> list[OracleSummary]:
    out = []
    for est in estimands:
        theta = exact_theta(law, est)
        total = exact_total(law, est.arms)
        out.append(OracleSummary(est.kind, theta, exact_theta(law, est, "sequential"), total,
                                 total - theta, exact_eif_mean(law, est),
                                 exact_eif_variance(law, est)))
    return out


def default_estimands(K: int, k_index: int | None = None) -> list[EstimandSpec]:
    """theta_k_prime / theta_k for the middle mediator, and theta_all."""
    k = K // 2 if k_index is None else k_index
    prime = MediatorPartition(tuple(range(k)), k, tuple(range(k + 1, K)))
    return [EstimandSpec("theta_k_prime", prime), EstimandSpec("theta_k", MediatorPartition.all_but(k, K)),
            EstimandSpec("theta_all")]
