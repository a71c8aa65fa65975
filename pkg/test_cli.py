"""
Command-line tests: simulate, estimate and compare end to end on tiny data
"""

import json

import numpy as np
import pandas as pd
import pytest

from tir_ipw import build_parser, main

TINY_SCENARIO = {
    "name": "tiny",
    "seed": 31,
    "grid": {"step_minutes": 60, "tau_days": 2},
    "ground_truth_n": 200,
    "groups": [
        {"label": "g1", "n": 30,
         "missing": {"mode": "cox_informative", "baseline_hazard": {"rate": 0.4, "exponent": 0.5},
                     "beta": [0.5, 0.5], "history_reference_mgdl": 180.0}},
        {"label": "g2", "n": 30, "mean": {"baseline": 150.0},
         "missing": {"mode": "cox_informative", "baseline_hazard": {"rate": 0.4, "exponent": 0.5},
                     "beta": [0.5, 0.5], "history_reference_mgdl": 180.0}},
    ],
}

ANALYSIS = ["--step-minutes", "60", "--tau-days", "2", "--ranges", "partition3"]


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_SCENARIO))
    return path


@pytest.fixture
def simulated(tmp_path, scenario_file):
    out = tmp_path / "sim"
    assert main(["-q", "simulate", "--scenario", str(scenario_file), "--out", str(out)]) == 0
    return out


@pytest.fixture
def complete_data(tmp_path):
    """Three subjects read every hour for a day and followed for two"""
    rng = np.random.default_rng(12)
    rows = [{"subject_id": f"s{i}", "time_minutes": 60.0 * j, "glucose_mgdl": rng.normal(150.0, 60.0)}
            for i in range(3) for j in range(25)]
    readings = tmp_path / "readings.csv"
    followups = tmp_path / "followups.csv"
    pd.DataFrame(rows).to_csv(readings, index=False)
    pd.DataFrame({"subject_id": ["s0", "s1", "s2"], "followup_days": [2.0] * 3}).to_csv(followups, index=False)
    return readings, followups


# ==================== simulate ====================

def test_simulate_writes_every_file(simulated):
    for label in ("g1", "g2"):
        for prefix in ("readings", "followups", "covariates", "complete_readings", "availability"):
            assert (simulated / f"{prefix}_{label}.csv").exists()
    truth = json.loads((simulated / "ground_truth.json").read_text())
    assert truth["seed"] == 31
    for values in truth["groups"].values():
        assert sum(v["mu"] for v in values.values()) == pytest.approx(1.0, abs=1e-12)


def test_simulate_is_reproducible(tmp_path, scenario_file, simulated):
    again = tmp_path / "again"
    assert main(["-q", "simulate", "--scenario", str(scenario_file), "--out", str(again)]) == 0
    for path in simulated.iterdir():
        assert (again / path.name).read_bytes() == path.read_bytes()


def test_simulate_seed_override(tmp_path, scenario_file, simulated):
    other = tmp_path / "other"
    assert main(["-q", "simulate", "--scenario", str(scenario_file), "--seed", "32", "--n", "10",
                 "--ground-truth-n", "0", "--out", str(other)]) == 0
    followups = pd.read_csv(other / "followups_g1.csv")
    assert len(followups) == 10
    assert not (other / "ground_truth.json").exists()


# ==================== estimate ====================

def test_estimate_on_simulated_data(tmp_path, simulated):
    out = tmp_path / "est"
    code = main(["-q", "estimate", "--readings", str(simulated / "readings_g1.csv"),
                 "--followups", str(simulated / "followups_g1.csv"),
                 "--covariates", str(simulated / "covariates_g1.csv"),
                 "--bootstrap-B", "0", "--out", str(out)] + ANALYSIS)
    assert code == 0
    estimates = pd.read_csv(out / "estimates.csv")
    assert len(estimates) == 9
    assert set(estimates["method"]) == {"naive", "proposed", "simplified"}
    for _, rows in estimates.groupby("method"):
        assert rows["estimate"].sum() == pytest.approx(1.0, abs=1e-9)
    curves = pd.read_csv(out / "pg_curve.csv")
    assert set(curves["method"]) == {"proposed", "simplified"}
    assert (out / "estimates.json").exists()
    fit = json.loads((out / "cox_fit_tau2.json").read_text())
    assert set(fit["covariates"]) == {"prev_day_mean", "z2"}
    assert len(fit["beta"]) == 2 and fit["converged"]
    assert fit["tau_days"] == 2.0


def test_estimate_with_bootstrap(tmp_path, simulated):
    out = tmp_path / "est"
    code = main(["-q", "estimate", "--readings", str(simulated / "readings_g1.csv"),
                 "--followups", str(simulated / "followups_g1.csv"), "--method", "naive",
                 "--bootstrap-B", "20", "--seed", "4", "--out", str(out)] + ANALYSIS)
    assert code == 0
    estimates = pd.read_csv(out / "estimates.csv")
    assert (estimates["se"] > 0).all()
    assert (estimates["ci_lo"] <= estimates["ci_hi"]).all()
    assert not list(out.glob("cox_fit_tau*.json"))


def test_complete_data_methods_agree(tmp_path, complete_data, capsys):
    readings, followups = complete_data
    out = tmp_path / "est"
    code = main(["estimate", "--readings", str(readings), "--followups", str(followups),
                 "--step-minutes", "60", "--tau-days", "1", "--ranges", "partition3",
                 "--bootstrap-B", "0", "--out", str(out)])
    assert code == 0
    estimates = pd.read_csv(out / "estimates.csv")
    assert set(estimates["method"]) == {"naive", "proposed", "simplified", "oracle"}
    for _, rows in estimates.groupby("range"):
        assert np.allclose(rows["estimate"], rows["estimate"].iloc[0], atol=1e-10)
    assert "oracle" in capsys.readouterr().out


def test_config_file_supplies_options(tmp_path, complete_data):
    readings, followups = complete_data
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"step_minutes": 60, "tau_days": [1], "ranges": ["[70,180]"],
                                  "bootstrap_B": 0, "method": "naive"}))
    out = tmp_path / "est"
    code = main(["estimate", "--readings", str(readings), "--followups", str(followups),
                 "--config", str(config), "--ranges", "partition3", "--out", str(out)])
    assert code == 0
    estimates = pd.read_csv(out / "estimates.csv")
    assert list(estimates["method"]) == ["naive"] * 3


def test_default_preset_aliases(tmp_path, complete_data):
    readings, followups = complete_data
    out = tmp_path / "est"
    code = main(["-q", "estimate", "--readings", str(readings), "--followups", str(followups),
                 "--step-minutes", "60", "--ranges", "paper6", "--tau-days", "paper5",
                 "--method", "naive", "--bootstrap-B", "0", "--out", str(out)])
    assert code == 0
    estimates = pd.read_csv(out / "estimates.csv")
    assert len(estimates) == 6 * 5
    assert sorted(estimates["tau_days"].unique()) == [1.0, 3.0, 5.0, 7.0, 9.0]


# ==================== compare ====================

def _compare_args(simulated, files):
    readings = [str(simulated / f"readings_{f}.csv") for f in files]
    followups = [str(simulated / f"followups_{f}.csv") for f in files]
    return ["--readings", *readings, "--followups", *followups]


def test_compare_identical_groups(tmp_path, simulated):
    out = tmp_path / "cmp"
    code = main(["-q", "compare", *_compare_args(simulated, ["g1", "g1"]), "--labels", "a", "b",
                 "--method", "naive", "--bootstrap-B", "10", "--out", str(out)] + ANALYSIS)
    assert code == 0
    report = json.loads((out / "comparison.json").read_text())
    assert len(report) == 3
    for entry in report:
        assert entry["p_value"] == 1.0
        assert entry["df"] == 1
    assert "p-value" in (out / "comparison.txt").read_text()


def test_compare_three_groups(tmp_path, simulated):
    out = tmp_path / "cmp"
    code = main(["-q", "compare", *_compare_args(simulated, ["g1", "g2", "g1"]),
                 "--labels", "a", "b", "c", "--method", "proposed", "--mode", "km",
                 "--bootstrap-B", "10", "--out", str(out)] + ANALYSIS)
    assert code == 0
    report = json.loads((out / "comparison.json").read_text())
    assert all(entry["df"] == 2 for entry in report)
    assert all(0.0 <= entry["p_value"] <= 1.0 for entry in report)


def test_compare_needs_bootstrap(tmp_path, simulated):
    code = main(["-q", "compare", *_compare_args(simulated, ["g1", "g2"]),
                 "--bootstrap-B", "0", "--out", str(tmp_path)] + ANALYSIS)
    assert code == 2


# ==================== replicate ====================

def test_replicate_writes_the_report(tmp_path, scenario_file):
    out = tmp_path / "mc"
    code = main(["-q", "replicate", "--scenario", str(scenario_file), "--reps", "2", "--n", "20",
                 "--bootstrap-B", "0", "--out", str(out)] + ANALYSIS)
    assert code == 0
    report = pd.read_csv(out / "montecarlo.csv")
    estimates = report[report["kind"] == "estimate"]
    assert set(estimates["group"]) == {"g1", "g2"}
    assert len(estimates) == 2 * 3 * 3


# ==================== errors ====================

def test_missing_input_is_a_pipeline_error(tmp_path, complete_data):
    _, followups = complete_data
    code = main(["-q", "estimate", "--readings", str(tmp_path / "absent.csv"),
                 "--followups", str(followups), "--out", str(tmp_path)])
    assert code == 1


def test_invalid_option_is_a_usage_error(tmp_path, complete_data):
    readings, followups = complete_data
    code = main(["-q", "estimate", "--readings", str(readings), "--followups", str(followups),
                 "--weight-floor", "0.7", "--out", str(tmp_path)])
    assert code == 2


def test_unknown_scenario(tmp_path):
    assert main(["-q", "simulate", "--scenario", "no_such_scenario", "--out", str(tmp_path)]) == 2


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
