from __future__ import annotations

import math

import numpy as np
import pytest

from targetmed.data import ConfigError
from targetmed.simharness import (
    CHECKED,
    RobustnessScenario,
    SimReport,
    run_consistency_sweep,
    run_coverage_study,
    run_injected_coverage,
    run_robustness_matrix,
    summarize_cell,
    worker_count,
)


def test_summary_identities():
    est = np.array([0.1, 0.3, 0.2, 0.6])
    ses = np.array([0.1, 0.1, 0.2, 0.05])
    cell = summarize_cell(est, ses, 0.25)
    err = est - 0.25
    assert cell["bias"] == pytest.approx(err.mean())
    assert cell["rmse"] ** 2 == pytest.approx(cell["bias"] ** 2 + err.var())
    assert cell["rmse"] == pytest.approx(math.sqrt(np.mean(err ** 2)))
    assert cell["mc_se"] == pytest.approx(est.std(ddof=1) / 2)
    assert cell["coverage"] == 0.75
    with pytest.raises(ConfigError):
        summarize_cell(np.array([]), np.array([]), 0.0)


def test_rep_floors(law, estimands):
    with pytest.raises(ConfigError):
        run_consistency_sweep(law, [estimands["theta_k"]], [200], reps=49)
    with pytest.raises(ConfigError):
        run_coverage_study(law, [estimands["theta_k"]], 200, reps=499)


def test_sweep_is_reproducible_and_shaped(tmp_path, law, estimands):
    kw = dict(estimands=[estimands["theta_k"]], n_grid=[200, 400], reps=50, J=2, base_seed=3)
    a = run_consistency_sweep(law, **kw)
    b = run_consistency_sweep(law, **kw)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(a.rows) == 2 * 2  # one per (n, estimator)
    assert {(r["n"], r["estimator"]) for r in a.rows} == {
        (200, "one_step"), (200, "tml"), (400, "one_step"), (400, "tml")}
    row = a.find(n=400, estimator="tml")
    assert row["root_n_rmse"] == pytest.approx(math.sqrt(400) * row["rmse"])
    paths = a.plot(tmp_path / "plots")
    assert {p.name for p in paths} == {"bias_vs_n.png", "coverage.png"}


def test_constant_outcome_always_covers(law, estimands):
    const = law.with_outcome(np.ones(law.y_p1.shape))
    rep = run_coverage_study(const, [estimands["theta_k_prime"]], 100, reps=500, J=2)
    for row in rep.rows:
        assert row["coverage"] == 1.0
        assert row["bias"] == 0.0


def test_scenario_sets(law, estimands):
    assert set(CHECKED) == {"a", "b", "c", "d", "e", "none_satisfied"}
    sc = RobustnessScenario(law, "d")
    assert sc.corrupted == {"b", "s", "u", "v"}
    with pytest.raises(ConfigError):
        RobustnessScenario(law, "z")
    with pytest.raises(ConfigError):
        sc.nuisances(estimands["theta_all"])


def test_robustness_rows(law, estimands):
    est = estimands["theta_k_prime"]
    scenarios = [RobustnessScenario(law, c) for c in CHECKED]
    rep = run_robustness_matrix(scenarios, est, [4000], reps=60, base_seed=1)
    assert len(rep.rows) == 6
    for row in rep.rows:
        if row["scenario"] == "none_satisfied":
            assert abs(row["exact_bias"]) > 0.01
            assert abs(row["bias"] - row["exact_bias"]) <= 4 * row["mc_se"]
        else:
            assert abs(row["exact_bias"]) <= 1e-13
            assert abs(row["bias"]) <= 4 * row["mc_se"]


def test_injected_coverage_relabels(law, estimands):
    rep = run_injected_coverage(RobustnessScenario(law, "a"), estimands["theta_k_prime"],
                                500, reps=20)
    assert rep.rows[0]["study"] == "coverage"


def test_report_merge_and_lookup():
    a = SimReport(rows=[{"study": "x", "n": 1}], timing={"x": 1.0})
    a.extend(SimReport(rows=[{"study": "y", "n": 1}], timing={"y": 2.0}))
    assert a.find(study="y")["n"] == 1
    with pytest.raises(KeyError):
        a.find(n=1)


def test_worker_env(monkeypatch):
    monkeypatch.setenv("TARGETMED_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("TARGETMED_WORKERS", "many")
    with pytest.raises(ConfigError):
        worker_count()
