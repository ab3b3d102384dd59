from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from targetmed import cli
from targetmed.data import EstimationError, save_table, table_schema
from targetmed.oracle import sample

PARTITION = {"z": ["m1"], "k": "m2", "l": ["m3"]}


@pytest.fixture
def data_config(tmp_path, law):
    table = sample(law, 600, 17)
    data = tmp_path / "data.csv"
    save_table(table, data)
    cfg = {"data": str(data), "schema": table_schema(table), "partition": PARTITION,
           "folds": [2, 4], "cutoff": "0.5"}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _write(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_estimate_grid(tmp_path, data_config, capsys):
    out = tmp_path / "run"
    assert cli.main(["estimate", "--config", str(data_config), "--out", str(out)]) == 0
    with (out / "table.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["folds", "estimator", "cutoff", "estimand", "IIE", "SE", "CIlow", "CIupp"]
    assert len(rows) == 1 + 12
    assert [r[0] for r in rows[1:]] == ["2"] * 6 + ["4"] * 6
    assert {r[2] for r in rows[1:]} == {"0.5"}
    res = json.loads((out / "results" / "theta_k_prime_tml_J4.json").read_text())
    assert res["folds"] == 4 and res["estimand"] == "theta_k_prime"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [1] and len(manifest["config_sha256"]) == 64
    assert "table.csv" in manifest["outputs"]
    assert capsys.readouterr().out.startswith("folds,estimator")


def test_seed_range_writes_sidecar(tmp_path, data_config):
    out = tmp_path / "run"
    code = cli.main(["estimate", "--config", str(data_config), "--out", str(out),
                     "--seeds", "1..3", "--folds", "3"])
    assert code == 0
    agg = json.loads((out / "results" / "theta_all_one_step_J3.json").read_text())
    assert agg["diagnostics"]["replicates"] == 3 and agg["seed"] is None
    with (out / "results" / "theta_all_one_step_J3_seeds.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["seed"]) for r in rows] == [1, 2, 3]
    thetas = [float(r["theta"]) for r in rows]
    assert min(thetas) <= agg["theta"] <= max(thetas)


def test_missing_column_exits_2(tmp_path, data_config, capsys):
    doc = json.loads(data_config.read_text())
    doc["schema"]["mediators"] = ["m1", "m2", "m_missing"]
    doc["partition"] = {"z": ["m1"], "k": "m2", "l": ["m_missing"]}
    path = _write(tmp_path, "bad.json", doc)
    assert cli.main(["estimate", "--config", path, "--out", str(tmp_path / "x")]) == 2
    assert "m_missing" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"folds": [1]}, {"estimands": ["theta_x"]}])
def test_bad_config_exits_2(tmp_path, data_config, doc):
    base = json.loads(data_config.read_text())
    base.update(doc)
    path = _write(tmp_path, "bad.json", base)
    assert cli.main(["estimate", "--config", path]) == 2


def test_unreadable_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert cli.main(["oracle", "--config", str(bad)]) == 2
    assert cli.main(["oracle", "--config", str(tmp_path / "absent.json")]) == 2
    assert cli.main(["estimate", "--seeds", "5..1", "--config", str(bad)]) == 2


def test_estimation_failure_exits_3(tmp_path, data_config, monkeypatch, capsys):
    def boom(*args, **kwargs):
        raise EstimationError("all replicates were excluded")

    monkeypatch.setattr(cli, "replicate", boom)
    assert cli.main(["estimate", "--config", str(data_config),
                     "--out", str(tmp_path / "r")]) == 3
    assert "all replicates were excluded" in capsys.readouterr().err


def test_oracle_on_canonical_fixture(tmp_path, capsys):
    assert cli.main(["oracle", "--out", str(tmp_path / "o")]) == 0
    doc = json.loads(capsys.readouterr().out)
    rows = {r["estimand"]: r for r in doc["estimands"]}
    assert set(rows) == {"theta_k_prime", "theta_k", "theta_all"}
    for r in rows.values():
        assert abs(r["eif_mean"]) <= 1e-13
    assert rows["theta_k_prime"]["theta"] == pytest.approx(0.66238363224, abs=1e-10)
    assert json.loads((tmp_path / "o" / "oracle.json").read_text()) == doc


def test_oracle_on_flat_outcome(tmp_path, law, capsys):
    flat = law.with_outcome(np.full(law.y_p1.shape, 0.3))
    law_path = tmp_path / "flat.json"
    flat.save(law_path)
    cfg = _write(tmp_path, "cfg.json", {"law": str(law_path)})
    assert cli.main(["oracle", "--config", cfg]) == 0
    for r in json.loads(capsys.readouterr().out)["estimands"]:
        assert r["theta"] == pytest.approx(0.3, abs=1e-15)


def test_simulate_consistency_is_reproducible(tmp_path, capsys):
    cfg = _write(tmp_path, "sim.json", {"study": "consistency", "n_grid": [200, 300],
                                        "reps": 50, "folds": [2], "estimands": ["theta_k"],
                                        "partition": {"z": [0, 2], "k": 1}, "plots": True})
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", str(b)]) == 0
    for name in ("report.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    with (a / "report.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert sorted((r["n"], r["estimator"]) for r in rows) == [
        ("200", "one_step"), ("200", "tml"), ("300", "one_step"), ("300", "tml")]
    assert (a / "bias_vs_n.png").exists() and (a / "timing.json").exists()


def test_simulate_robustness_rows(tmp_path):
    cfg = _write(tmp_path, "rob.json", {"study": "robustness", "n_grid": [4000], "reps": 60,
                                        "estimands": ["theta_k_prime"],
                                        "partition": PARTITION})
    out = tmp_path / "rob"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    with (out / "report.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["scenario"] for r in rows] == ["a", "b", "c", "d", "e", "none_satisfied"]
    vanishing = [abs(float(r["exact_bias"])) <= 1e-13 for r in rows]
    assert vanishing == [True] * 5 + [False]


def test_seed_parsing():
    assert cli.parse_seeds("1..4") == [1, 2, 3, 4]
    assert cli.parse_seeds("3, 5") == [3, 5]
    assert cli.parse_seeds("7") == [7]
