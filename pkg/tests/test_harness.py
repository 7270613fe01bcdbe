import csv
import math

import numpy as np
import pytest

from gbpse.harness import (
    DATA_DIR, ConfigError, RunConfig, final_medians, monte_carlo, nu_for_budget, rmse, run_trial,
    states_csv, sweep_q, trace_csv, trial_seeds,
)
from gbpse.engine import GbpEngine, Schedule
from gbpse.factor_graph import build_graph
from gbpse.measurements import StateVector


def test_rmse_examples():
    a = StateVector(np.array([1.0]), np.array([1.0]))
    b = StateVector(np.array([0.0]), np.array([1.0]))
    assert rmse(a, b) == pytest.approx(0.5, rel=1e-15)
    assert rmse(a, a) == 0.0
    x = StateVector(np.array([3.0, 0.0]), np.array([1.0, 5.0]))
    y = StateVector(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    assert rmse(x, y) == pytest.approx(1.25, rel=1e-15)
    with pytest.raises(ValueError):
        rmse(x, a)


def test_rmse_divides_by_n():
    # n = 2 with a unit difference in every entry: sqrt(2) / 2
    x = StateVector(np.array([1.0]), np.array([2.0]))
    y = StateVector(np.array([0.0]), np.array([1.0]))
    assert rmse(x, y) == pytest.approx(0.70711, abs=1e-5)


def test_nu_for_budget():
    assert nu_for_budget(4, 4676) == 7
    assert nu_for_budget(2, 4676) == 24
    assert sum(nu ** 2 for nu in range(1, 25)) == 4900


def test_trial_seeds_independent_of_order():
    assert trial_seeds(0, 1, 5) == trial_seeds(0, 1, 5)
    assert len({trial_seeds(0, s, t) for s in range(4) for t in range(50)}) == 200


def test_config_round_trip_and_validation(tmp_path):
    cfg = RunConfig("ieee14.json", "ieee14_61dev.json", trials=3)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"trials": 0}, {"sigma2": [0.0]}, {"sigma2": []}, {"workers": 0}, {"p": 2.0},
                {"bogus": 1}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"case": "a", "devices": "b", **bad})
    path = tmp_path / "cfg.json"
    path.write_text("[")
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "case.json").write_text((DATA_DIR / "toy3.json").read_text())
    path = tmp_path / "cfg.json"
    path.write_text('{"case": "case.json", "devices": "toy3_5dev.json", "output_dir": "out"}')
    cfg = RunConfig.load(path)
    assert cfg.case == str(tmp_path / "case.json")
    assert cfg.devices == "toy3_5dev.json"
    assert cfg.output_dir == str(tmp_path / "out")


def _cfg(tmp_path, **kw):
    base = dict(case="ieee14.json", devices="ieee14_61dev.json", sigma2=(1e-4, 1e-8), trials=3,
                nu_max=3, output_dir=str(tmp_path))
    base.update(kw)
    return RunConfig(**base)


def test_monte_carlo_outputs(tmp_path):
    res = monte_carlo(_cfg(tmp_path))
    assert len(res.records) == 2 * 3 * 3
    assert not res.anomalies
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["sigma2", "nu", "tau", "median_rmse", "mean_rmse", "n_trials"]
    assert [(r["sigma2"], r["nu"]) for r in rows] == [
        ("0.0001", "1"), ("0.0001", "2"), ("0.0001", "3"), ("1e-08", "1"), ("1e-08", "2"),
        ("1e-08", "3")]
    with open(tmp_path / "rmse.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["sigma2", "trial", "nu", "tau", "rmse"]
    assert all(math.isfinite(float(r["rmse"])) and float(r["rmse"]) >= 0 for r in rows)
    assert (tmp_path / "anomalies.csv").read_text() == "sigma2,trial,error,message\n"
    medians = final_medians(res.summary)
    assert set(medians) == {1e-4, 1e-8}


def test_monte_carlo_repeatable_and_worker_independent(tmp_path):
    one, two, again = tmp_path / "one", tmp_path / "two", tmp_path / "again"
    monte_carlo(_cfg(one))
    monte_carlo(_cfg(two, workers=2))
    monte_carlo(_cfg(again))
    for name in ("rmse.csv", "summary.csv", "anomalies.csv"):
        assert (one / name).read_bytes() == (two / name).read_bytes()
        assert (one / name).read_bytes() == (again / name).read_bytes()


def test_noise_free_trial_matches_oracle(tmp_path):
    cfg = _cfg(tmp_path, sigma2=(1e-8,), trials=1, nu_max=7, noise_scale=0.0)
    res = run_trial(cfg, 0, 0)
    assert res.error is None
    assert res.records[-1].rmse <= 1e-6


def test_anomalies_recorded(tmp_path):
    # toy3 cannot deliver a marginal for V3 after a single inner iteration
    cfg = _cfg(tmp_path, case="toy3.json", devices="toy3_5dev.json", sigma2=(1e-4,), trials=2)
    res = monte_carlo(cfg)
    assert len(res.anomalies) == 2 and not res.records
    lines = (tmp_path / "anomalies.csv").read_text().splitlines()
    assert lines[1].startswith("0.0001,0,UnobservableVariable,")


def test_sweep_q_outputs(tmp_path):
    cfg = _cfg(tmp_path, sigma2=(1e-4,), trials=2, q_values=(3, 4), budget=100)
    res = sweep_q(cfg)
    with open(tmp_path / "sweep_q.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["q", "nu_max", "nu", "tau", "inner_cumulative", "median_rmse",
                             "mean_rmse", "n_trials"]
    q3 = [r for r in rows if r["q"] == "3"]
    assert len(q3) == nu_for_budget(3, 100) == 4
    assert [int(r["inner_cumulative"]) for r in q3] == [1, 9, 36, 100]
    assert not res.anomalies


def test_trace_and_state_csv(ieee14):
    eng = GbpEngine(build_graph(ieee14.case, ieee14.measurements, ieee14.adm), ieee14.case)
    trace = eng.run(schedule=Schedule(q=2, nu_max=2, tol=0))
    text = trace_csv(trace)
    assert text.splitlines()[0] == "nu,tau,rmse,max_abs_increment"
    assert text.splitlines()[1].startswith("1,1,,")
    lines = states_csv(trace).splitlines()
    assert lines[0].split(",")[:2] == ["nu", "theta_1"]
    assert lines[0].split(",")[-1] == "v_14"
    assert lines[1] == "0," + ",".join(["0.0"] * 14 + ["1.0"] * 14)
    assert len(lines) == 4
    # shortest round-trip formatting
    value = float(lines[2].split(",")[20])
    assert repr(value) == lines[2].split(",")[20]
