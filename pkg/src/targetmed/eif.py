"""Row-wise efficient influence functions for the three interventional means."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .data import ArmSpec, EstimationError, ObservationTable
from .nuisance import NuisanceSet

COMPONENTS = ("d_y", "d_z", "d_mk", "d_l", "d_w")


@dataclass(frozen=True)
class StabilizationFactors:
    """Empirical mean of each component's raw inverse-probability weight (1.0 when off)."""

    y: float = 1.0
    z: float = 1.0
    mk: float = 1.0
    l: float = 1.0

    def to_dict(self) -> dict:
        return {"d_y": self.y, "d_z": self.z, "d_mk": self.mk, "d_l": self.l}


@dataclass(frozen=True)
class EifTable:
    d_y: NDArray
    d_z: NDArray
    d_mk: NDArray
    d_l: NDArray
    d_w: NDArray
    factors: StabilizationFactors = StabilizationFactors()

    @property
    def total(self) -> NDArray:
        return self.d_y + self.d_z + self.d_mk + self.d_l + self.d_w

    @property
    def n(self) -> int:
        return int(self.d_y.shape[0])

    def means(self) -> dict[str, float]:
        return {c: float(getattr(self, c).mean()) for c in COMPONENTS}

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["row_id", *COMPONENTS, "total"])
            total = self.total
            for i in range(self.n):
                writer.writerow([i, *(repr(float(getattr(self, c)[i])) for c in COMPONENTS),
                                 repr(float(total[i]))])


def stabilize(weights: NDArray) -> tuple[NDArray, float]:
    """Divide weights by their empirical mean so they average to one."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise EstimationError("weights must be non-negative")
    factor = float(weights.mean())
    if factor <= 0.0:
        raise EstimationError("all weights are zero (no rows in the weighted arm)")
    return weights / factor, factor


def _maybe(weights: NDArray, on: bool) -> tuple[NDArray, float]:
    return stabilize(weights) if on else (weights, 1.0)


def _indicators(table: ObservationTable, arms: ArmSpec) -> tuple[NDArray, NDArray]:
    return (table.a == arms.a_prime).astype(float), (table.a == arms.a_star).astype(float)


def _check_finite(eif: EifTable) -> EifTable:
    for c in COMPONENTS:
        bad = np.flatnonzero(~np.isfinite(getattr(eif, c)))
        if bad.size:
            raise EstimationError(f"non-finite influence function value in {c} at row {int(bad[0])}")
    return eif


def d_mk_general(table: ObservationTable, ns: NuisanceSet, arms: ArmSpec = ArmSpec()) -> NDArray:
    """M_k component without the binary simplification (unstabilised)."""
    _, ind_s = _indicators(table, arms)
    u_obs = np.where(ns.mk == 1.0, ns.u1, ns.u0)
    u_bar = ns.u1 * ns.q_star1 + ns.u0 * (1.0 - ns.q_star1)
    return ind_s / ns.g_star * (u_obs - u_bar)


def _mediator_shift(table, ns: NuisanceSet, theta_plugin: float, stab: bool, arms: ArmSpec,
                    with_l: bool) -> EifTable:
    ns.require("g", "q_star1", "r1", "b_obs", "s", "u1", "u0", "v", "lmean1", "lmean0")
    ind_p, ind_s = _indicators(table, arms)
    w_y, f_y = _maybe(ind_p / ns.g * ns.q_star_obs / ns.r_obs, stab)
    w_z, f_z = _maybe(ind_p / ns.g, stab)
    w_mk, f_mk = _maybe(ind_s / ns.g_star, stab)
    d_y = w_y * (table.y - ns.b_obs)
    d_z = w_z * (ns.s - ns.v)
    d_mk = w_mk * (ns.u1 - ns.u0) * (ns.mk - ns.q_star1)
    if with_l:
        d_l = w_y * (ns.b_obs - ns.lmean_obs)
        f_l = f_y
    else:
        d_l = np.zeros(table.n)
        f_l = 1.0
    d_w = ns.v - theta_plugin
    return _check_finite(EifTable(d_y, d_z, d_mk, d_l, d_w,
                                  StabilizationFactors(f_y, f_z, f_mk, f_l)))


def eif_theta_k_prime(table: ObservationTable, nuisances: NuisanceSet, theta_plugin: float,
                      stabilize: bool = True, arms: ArmSpec = ArmSpec()) -> EifTable:
    """Influence function for the shift of ``M_k`` with flow-on effects on ``L``.

    The ``M_k`` component uses the binary-mediator form
    ``1{a=a*}/g(a*|w) (u(a',1,w) - u(a',0,w)) (m_k - q(1|a*,w))``.
    """
    return _mediator_shift(table, nuisances, theta_plugin, stabilize, arms, with_l=True)


def eif_theta_k(table: ObservationTable, nuisances: NuisanceSet, theta_plugin: float,
                stabilize: bool = True, arms: ArmSpec = ArmSpec()) -> EifTable:
    """Influence function for the shift of ``M_k`` alone (no descendants, ``d_l = 0``)."""
    return _mediator_shift(table, nuisances, theta_plugin, stabilize, arms, with_l=False)


def eif_theta_all(table: ObservationTable, nuisances: NuisanceSet, theta_plugin: float,
                  stabilize: bool = True, arms: ArmSpec = ArmSpec()) -> EifTable:
    """Influence function for the joint shift of all mediators.

    The outcome weight is ``1{a=a'} p(a*|m,w) / (p(a'|m,w) g(a*|w))``, i.e.
    ``1{a=a'}/g(a'|w) * q(m|a*,w)/q(m|a',w)`` by Bayes' rule. A single binary
    mediator is evaluated through the mediator-shift form, which coincides.
    """
    if nuisances.kind == "mediator_shift":
        return _mediator_shift(table, nuisances, theta_plugin, stabilize, arms, with_l=False)
    ns = nuisances
    ns.require("g", "pa", "b_obs", "u_star")
    ind_p, ind_s = _indicators(table, arms)
    w_y, f_y = _maybe(ind_p * (1.0 - ns.pa) / (ns.pa * ns.g_star), stabilize)
    w_mk, f_mk = _maybe(ind_s / ns.g_star, stabilize)
    zeros = np.zeros(table.n)
    d_y = w_y * (table.y - ns.b_obs)
    d_mk = w_mk * (ns.b_obs - ns.u_star)
    d_w = ns.u_star - theta_plugin
    return _check_finite(EifTable(d_y, zeros, d_mk, zeros.copy(), d_w,
                                  StabilizationFactors(f_y, 1.0, f_mk, 1.0)))


def plugin_term(nuisances: NuisanceSet) -> NDArray:
    """Per-row plug-in ``v(a', w)`` (``u(a*, w)`` for the joint shift)."""
    return nuisances.u_star if nuisances.kind == "joint_shift" else nuisances.v


def eif_for(kind: str):
    return {"theta_k_prime": eif_theta_k_prime, "theta_k": eif_theta_k,
            "theta_all": eif_theta_all}[kind]
