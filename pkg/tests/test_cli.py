import json

import pandas as pd
import pytest

from donorselect.main import main

SMALL = ["--n-donors", "40", "--t-pre", "30", "--t-post", "5"]


def _read(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def simulated(tmp_path):
    out = tmp_path / "sim"
    assert main(["--output-dir", str(out), "--seed", "3", "simulate", *SMALL]) == 0
    return out


def _select(tmp_path, simulated, *extra):
    out = tmp_path / "select"
    code = main([
        "--output-dir", str(out), "select", str(simulated / "panel.csv"),
        "--intervention-time", "31", *extra,
    ])
    return code, out


def test_simulate_writes_panel_truth_and_manifest(simulated):
    panel = pd.read_csv(simulated / "panel.csv")
    assert panel.shape == (35, 42)
    truth = _read(simulated / "truth.json")
    assert truth["intervention_time"] == 31
    assert len(truth["valid_ids"]) == 8
    manifest = _read(simulated / "manifest.json")
    assert manifest["command"] == "simulate"
    assert str(simulated / "panel.csv") in manifest["files"]


def test_simulate_defaults(tmp_path):
    assert main(["--output-dir", str(tmp_path), "simulate"]) == 0
    panel = pd.read_csv(tmp_path / "panel.csv")
    assert panel.shape == (130, 1002)


def test_simulate_is_reproducible(tmp_path, simulated):
    again = tmp_path / "again"
    assert main(["--output-dir", str(again), "--seed", "3", "simulate", *SMALL]) == 0
    assert (again / "panel.csv").read_bytes() == (simulated / "panel.csv").read_bytes()
    assert (again / "truth.json").read_bytes() == (simulated / "truth.json").read_bytes()


def test_invalid_simulation_parameter_exits_2(tmp_path, capsys):
    assert main(["--output-dir", str(tmp_path), "simulate", "--t-pre", "1"]) == 2
    assert "t_pre" in capsys.readouterr().err


def test_select_s1(tmp_path, simulated):
    code, out = _select(tmp_path, simulated, "--procedure", "S1", "--k", "10")
    assert code == 0
    report = _read(out / "selection.json")
    assert len(report["pvd_ids"]) == 10
    assert len(report["excluded_ids"]) == 30
    assert not (out / "selection.csv").exists()


def test_estimate_writes_effect_and_sensitivity(tmp_path, simulated):
    _, selected = _select(tmp_path, simulated, "--procedure", "S1", "--k", "10")
    out = tmp_path / "estimate"
    code = main([
        "--output-dir", str(out), "--format", "csv", "estimate", str(simulated / "panel.csv"),
        "--intervention-time", "31", "--selection", str(selected / "selection.json"), "--k", "5",
    ])
    assert code == 0
    effect = _read(out / "effect.json")
    assert {"tau_hat", "interval_95", "per_time_effects", "weights"} <= set(effect)
    assert len(effect["weights"]) == 5
    sensitivity = _read(out / "sensitivity.json")
    assert sensitivity["n_used"] == 5
    assert list(pd.read_csv(out / "fn_curve.csv").columns) == ["tau_spill", "bound"]
    assert len(pd.read_csv(out / "effect.csv")) == 35


def test_debias_without_excluded_donors_exits_2(tmp_path, simulated, capsys):
    selection = tmp_path / "selection.json"
    selection.write_text(json.dumps({"pvd_ids": ["x0000", "x0001"], "excluded_ids": []}), encoding="utf-8")
    code = main([
        "--output-dir", str(tmp_path / "debias"), "debias", str(simulated / "panel.csv"),
        "--intervention-time", "31", "--selection", str(selection),
    ])
    assert code == 2
    assert "debias" in capsys.readouterr().err


def test_experiment_csv_is_reproducible(tmp_path):
    config = tmp_path / "user.json"
    config.write_text(json.dumps({"simulation": {"t_pre": 40, "t_post": 10}}), encoding="utf-8")

    def run(name):
        out = tmp_path / name
        code = main([
            "--output-dir", str(out), "--format", "csv", "--config", str(config),
            "experiment", "--replicates", "2", "--procedures", "All", "Valid", "--n-donors", "60",
        ])
        assert code == 0
        return out

    first, second = run("first"), run("second")
    lines = (first / "bias.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "procedure,mean_bias,ci_lo,ci_hi"
    assert [line.split(",")[0] for line in lines[1:]] == ["All", "Valid"]
    assert (first / "bias.csv").read_bytes() == (second / "bias.csv").read_bytes()
    summary = _read(first / "bias_summary.json")
    assert summary["experiment"]["sim"]["t_pre"] == 40
    assert summary["replicates"] == 2


def test_unknown_config_section_exits_2(tmp_path, capsys):
    config = tmp_path / "user.json"
    config.write_text(json.dumps({"plotting": {}}), encoding="utf-8")
    assert main(["--output-dir", str(tmp_path), "--config", str(config), "simulate"]) == 2
    assert "plotting" in capsys.readouterr().err


def test_missing_panel_exits_2(tmp_path):
    code = main([
        "--output-dir", str(tmp_path), "select", str(tmp_path / "nope.csv"), "--intervention-time", "5",
    ])
    assert code == 2


def test_negative_seed_exits_2(tmp_path, capsys):
    code = main(["--output-dir", str(tmp_path), "--seed", "-1", "experiment", "--replicates", "1", "--n-donors", "40"])
    assert code == 2
    assert "seed" in capsys.readouterr().err


def test_negative_sc_lambda_in_config_exits_2(tmp_path, capsys):
    config = tmp_path / "user.json"
    config.write_text(json.dumps({"sc": {"ridge_lambda": -1}}), encoding="utf-8")
    assert main(["--output-dir", str(tmp_path), "--config", str(config), "simulate"]) == 2
    assert "sc.ridge_lambda" in capsys.readouterr().err


def test_shift_study_records_zero_loading_fraction(tmp_path):
    config = tmp_path / "user.json"
    config.write_text(json.dumps({"simulation": {"t_pre": 40, "t_post": 10}}), encoding="utf-8")
    out = tmp_path / "shift"
    code = main([
        "--output-dir", str(out), "--config", str(config), "experiment", "--replicates", "2",
        "--procedures", "All", "--n-donors", "40", "--shift-mean", "0.5", "--shift-offsets", "0", "2",
        "--zero-loading-fraction", "0.25",
    ])
    assert code == 0
    summary = _read(out / "bias_summary.json")
    assert summary["zero_first_loading_fraction"] == 0.25
