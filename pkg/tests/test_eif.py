from __future__ import annotations

import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from targetmed.data import EstimandSpec, EstimationError, MediatorPartition
from targetmed.eif import (
    COMPONENTS,
    d_mk_general,
    eif_for,
    eif_theta_all,
    eif_theta_k,
    eif_theta_k_prime,
    plugin_term,
    stabilize,
)
from targetmed.oracle import (
    DiscreteLaw,
    exact_eif_mean,
    exact_nuisances,
    exact_theta,
    sample,
    support_table,
)


def _exact_rows(law, est, table=None):
    table = support_table(law)[0] if table is None else table
    return table, exact_nuisances(law, est).at(table, law), exact_theta(law, est)


def _single_mediator_law() -> DiscreteLaw:
    return DiscreteLaw(
        w_values=[[0.0], [1.0]], p_w=[0.4, 0.6], p_a1=[0.35, 0.65],
        mediator_p1=(np.array([[0.3, 0.6], [0.4, 0.75]]),),
        y_p1=np.array([[[0.2, 0.5], [0.3, 0.7]], [[0.25, 0.55], [0.4, 0.8]]]),
    )


def test_stabilize_examples():
    w, f = stabilize(np.array([2.0, 0.0, 0.0, 2.0]))
    assert w.tolist() == [2.0, 0.0, 0.0, 2.0] and f == 1.0
    w, f = stabilize(np.array([4.0, 0.0]))
    assert w.tolist() == [2.0, 0.0] and f == 2.0
    with pytest.raises(EstimationError):
        stabilize(np.zeros(3))
    with pytest.raises(EstimationError):
        stabilize(np.array([1.0, -1.0]))


@given(arrays(float, st.integers(1, 50), elements=st.floats(1e-3, 1e3)))
def test_stabilized_weights_average_one(weights):
    w, _ = stabilize(weights)
    assert abs(w.mean() - 1.0) <= 1e-12


@pytest.mark.parametrize("kind", ["theta_k_prime", "theta_k", "theta_all"])
def test_enumerated_mean_is_zero(law, estimands, kind):
    assert abs(exact_eif_mean(law, estimands[kind])) <= 1e-12


@pytest.mark.parametrize("kind", ["theta_k_prime", "theta_k", "theta_all"])
def test_constant_outcome_gives_zero_components(law, estimands, kind):
    const = law.with_outcome(np.full(law.y_p1.shape, 0.4))
    est = estimands[kind]
    table = sample(const, 300, 1).with_outcome(np.full(300, 0.4))
    _, ns, theta = _exact_rows(const, est, table)
    assert abs(theta - 0.4) <= 1e-15
    eif = eif_for(kind)(table, ns, 0.4, True, est.arms)
    for c in COMPONENTS:
        assert np.max(np.abs(getattr(eif, c))) <= 1e-12, c


def test_binary_mediator_form_matches_general_form(law, estimands):
    est = estimands["theta_k_prime"]
    table, ns, theta = _exact_rows(law, est)
    eif = eif_theta_k_prime(table, ns, theta, stabilize=False)
    assert np.max(np.abs(eif.d_mk - d_mk_general(table, ns))) <= 1e-12


def test_mediator_shift_without_descendants_reduces(law):
    est = EstimandSpec("theta_k", MediatorPartition((0, 2), 1, ()))
    table, ns, theta = _exact_rows(law, est)
    a = eif_theta_k_prime(table, ns, theta, stabilize=True)
    b = eif_theta_k(table, ns, theta, stabilize=True)
    for c in COMPONENTS:
        assert np.max(np.abs(getattr(a, c) - getattr(b, c))) <= 1e-12


def test_single_mediator_joint_shift_reduces():
    law = _single_mediator_law()
    k = EstimandSpec("theta_k", MediatorPartition((), 0, ()))
    table, ns, theta = _exact_rows(law, k)
    assert abs(theta - exact_theta(law, EstimandSpec("theta_all"))) <= 1e-15
    a = eif_theta_k(table, ns, theta, stabilize=False)
    ns_all = exact_nuisances(law, EstimandSpec("theta_all")).at(table, law)
    b = eif_theta_all(table, ns_all, theta, stabilize=False)
    assert np.max(np.abs(a.total - b.total)) <= 1e-12
    assert abs(exact_eif_mean(law, EstimandSpec("theta_all"))) <= 1e-12


def test_exposure_independent_of_mediators_gives_constant_ratio(law):
    # A independent of W, mediators and outcome ignore A: p(a*|m,w)/p(a'|m,w) = g(a*)/g(a')
    meds = tuple(np.broadcast_to(m[:, :1], m.shape).copy() for m in law.mediator_p1)
    y = np.broadcast_to(law.y_p1[:, :1], law.y_p1.shape).copy()
    flat = DiscreteLaw(law.w_values, law.p_w, np.full(law.nw, 0.3), meds, y)
    ex = exact_nuisances(flat, EstimandSpec("theta_all"))
    ratio = (1.0 - ex.pa) / ex.pa
    assert np.max(np.abs(ratio - 0.7 / 0.3)) <= 1e-12


def test_components_are_additive(law, estimands):
    table = sample(law, 200, 3)
    for kind, est in estimands.items():
        _, ns, theta = _exact_rows(law, est, table)
        eif = eif_for(kind)(table, ns, theta, True, est.arms)
        manual = eif.d_y + eif.d_z + eif.d_mk + eif.d_l + eif.d_w
        assert np.array_equal(eif.total, manual)
        assert np.allclose(eif.d_w, plugin_term(ns) - theta)


def test_stabilization_factors_reported(law, estimands):
    table = sample(law, 500, 4)
    est = estimands["theta_k_prime"]
    _, ns, theta = _exact_rows(law, est, table)
    raw = eif_theta_k_prime(table, ns, theta, stabilize=False)
    stab = eif_theta_k_prime(table, ns, theta, stabilize=True)
    f = stab.factors
    assert np.allclose(stab.d_y * f.y, raw.d_y)
    assert np.allclose(stab.d_z * f.z, raw.d_z)
    assert np.allclose(stab.d_mk * f.mk, raw.d_mk)
    assert raw.factors.to_dict() == {"d_y": 1.0, "d_z": 1.0, "d_mk": 1.0, "d_l": 1.0}


def test_non_finite_values_name_the_row(law, estimands):
    est = estimands["theta_k_prime"]
    table, ns, theta = _exact_rows(law, est)
    g = ns.g.copy()
    g[5] = 0.0
    bad = dataclasses.replace(ns, g=g)
    with pytest.raises(EstimationError, match="row 5"):
        eif_theta_k_prime(table, bad, theta, stabilize=False)


def test_csv_export(tmp_path, law, estimands):
    est = estimands["theta_all"]
    table = sample(law, 20, 9)
    _, ns, theta = _exact_rows(law, est, table)
    eif = eif_theta_all(table, ns, theta)
    path = tmp_path / "eif.csv"
    eif.to_csv(path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["row_id", *COMPONENTS, "total"]
    assert len(rows) == 21
    assert float(rows[3][-1]) == eif.total[2]
