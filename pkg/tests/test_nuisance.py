from __future__ import annotations

import warnings

import numpy as np
import pytest

from targetmed.data import ConfigError, EstimandSpec, MediatorPartition, partition_folds
from targetmed.nuisance import (
    LearnerStacks,
    density_ratio,
    fit_nuisances,
    fit_primary_nuisances,
)
from targetmed.oracle import DiscreteLaw, exact_nuisances, sample

from conftest import make_table


@pytest.fixture(scope="module")
def big_fit(law, sat_stacks, estimands):
    table = sample(law, 5000, 3)
    plan = partition_folds(table, 5, 3)
    est = estimands["theta_k_prime"]
    cf = fit_nuisances(table, plan, est, sat_stacks)
    return table, cf.assemble(), exact_nuisances(law, est).at(table, law)


def test_density_ratio_examples():
    assert density_ratio(0.2, 0.4) == 0.5
    assert density_ratio(0.3, 0.3) == 1.0


def test_density_ratio_equals_bayes_ratio_on_the_support(law, estimands):
    ex = exact_nuisances(law, estimands["theta_k_prime"])
    for w in range(law.nw):
        for z in range(ex.p_z.shape[1]):
            for mk in (0, 1):
                q = ex.q_prime1[w] if mk else 1 - ex.q_prime1[w]
                r = ex.r1[w, z] if mk else 1 - ex.r1[w, z]
                bayes = ex.p_z[w, z] / ex.p_z_mk[w, z, mk]
                assert abs(density_ratio(q, r) - bayes) <= 1e-14


@pytest.mark.parametrize("name", ["s", "u1", "u0", "v"])
def test_repeated_regressions_track_enumeration(big_fit, name):
    _, est, exact = big_fit
    gap = np.max(np.abs(getattr(est, name) - getattr(exact, name)))
    assert gap <= 0.05, f"{name}: {gap}"


def test_outcome_regression_is_accurate_on_average(big_fit):
    # saturated cell means: error is cell-level sampling noise (about 50 rows per cell)
    _, est, exact = big_fit
    assert np.mean(np.abs(est.b_obs - exact.b_obs)) <= 0.06


def test_plugin_mean_near_truth(big_fit, law, estimands):
    from targetmed.oracle import exact_theta

    _, est, _ = big_fit
    assert abs(est.v.mean() - exact_theta(law, estimands["theta_k_prime"])) <= 0.03


def test_propensity_matches_marginal_when_exposure_ignores_w(law):
    flat = DiscreteLaw(law.w_values, law.p_w, np.full(law.nw, 0.4), law.mediator_p1, law.y_p1,
                       law.w_names, law.mediator_names)
    table = sample(flat, 4000, 5)
    plan = partition_folds(table, 5, 5)
    cf = fit_primary_nuisances(table, plan, EstimandSpec("theta_all"))
    assert np.max(np.abs(cf.assemble().g - 0.4)) <= 0.05


def test_q_and_r_agree_under_conditional_independence(law):
    # M_2 depends on (w, a) only, so r(m_2 | a, m_1, w) = q(m_2 | a, w)
    med = list(law.mediator_p1)
    base = med[1][..., 0]
    med[1] = np.stack([base, base], axis=-1)
    ci = DiscreteLaw(law.w_values, law.p_w, law.p_a1, tuple(med), law.y_p1,
                     law.w_names, law.mediator_names)
    est = EstimandSpec("theta_k_prime", MediatorPartition((0,), 1, (2,)))
    gaps = []
    for n in (1000, 16000):
        table = sample(ci, n, 8)
        ns = fit_primary_nuisances(table, partition_folds(table, 4, 8), est).assemble()
        gaps.append(float(np.max(np.abs(ns.q_prime1 - ns.r1))))
    assert gaps[1] < gaps[0]
    assert gaps[1] <= 0.05


def test_constant_outcome_propagates_exactly(law, estimands):
    table = sample(law, 400, 2).with_outcome(np.ones(400))
    plan = partition_folds(table, 4, 2)
    for kind, est in estimands.items():
        ns = fit_nuisances(table, plan, est).assemble()
        names = ("b_obs", "u_star") if ns.kind == "joint_shift" else (
            "b_obs", "b1", "b0", "lmean1", "lmean0", "s", "u1", "u0", "v")
        for name in names:
            assert np.all(getattr(ns, name) == 1.0), (kind, name)


def test_held_out_outcomes_do_not_touch_their_own_predictions(law, estimands):
    table = sample(law, 600, 4)
    plan = partition_folds(table, 3, 4, stratified=False)
    est = estimands["theta_k_prime"]
    base = fit_nuisances(table, plan, est).assemble()
    held = plan.assignments == 0
    y2 = table.y.copy()
    y2[held] = 1.0 - y2[held]
    other = fit_nuisances(table.with_outcome(y2), plan, est).assemble()
    for name in ("b_obs", "s", "u1", "v", "Q"):
        a, b = getattr(base, name)[held], getattr(other, name)[held]
        assert np.array_equal(a, b), name
    assert not np.array_equal(base.b_obs[~held], other.b_obs[~held])


def test_shortcut_paths_agree_with_regressions(law, sat_stacks):
    table = sample(law, 4000, 6)
    plan = partition_folds(table, 4, 6)
    # L empty: closed form for s and lmean; Z empty: u from lmean
    for part in (MediatorPartition((0,), 1, ()), MediatorPartition((), 0, (1, 2))):
        est = EstimandSpec("theta_k", part) if not part.l_indices else \
            EstimandSpec("theta_k_prime", part)
        short = fit_nuisances(table, plan, est, sat_stacks, shortcuts=True).assemble()
        long = fit_nuisances(table, plan, est, sat_stacks, shortcuts=False).assemble()
        for name in ("s", "u1", "u0", "v"):
            assert np.max(np.abs(getattr(short, name) - getattr(long, name))) <= 0.02, name


def test_single_class_fit_warns_and_falls_back():
    n = 40
    a = np.tile([0.0, 1.0], n // 2)
    m = np.ones(n)
    y = np.tile([0.0, 0.0, 1.0, 1.0], n // 4)
    table = make_table(y, a, np.linspace(0, 1, n), m)
    plan = partition_folds(table, 2, 1)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        ns = fit_primary_nuisances(table, plan, EstimandSpec("theta_all")).assemble()
    assert any("single outcome class" in str(r.message) for r in rec)
    assert np.all(np.isfinite(ns.q_star1))


def test_stack_config_validation():
    with pytest.raises(ConfigError):
        LearnerStacks.from_config({"banana": [{"kind": "glm"}]})
    with pytest.raises(ConfigError):
        LearnerStacks.from_config({"b": []})
    with pytest.raises(ConfigError):
        LearnerStacks.from_config([{"kind": "forest"}])
    stacks = LearnerStacks.from_config({"default": [{"kind": "glm"}],
                                        "b": [{"kind": "lasso", "lam": 0.1}]})
    assert stacks.specs("b", "binomial")[0].kind == "lasso"
    assert stacks.specs("g", "binomial")[0].kind == "glm"


def test_too_few_rows_rejected(law, estimands):
    table = sample(law, 9, 1)
    with pytest.raises(ConfigError):
        fit_primary_nuisances(table, partition_folds(table, 5, 1), estimands["theta_all"])
