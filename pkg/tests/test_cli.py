import json
import math

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner
from src.cli import main


def _config(tmp_path, data):
    path = tmp_path / "settings.yaml"
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_missing_config_exits_with_config_error(tmp_path):
    result = CliRunner().invoke(main, ["model-bvp", "--config", str(tmp_path / "missing.yaml")])
    assert result.exit_code == 2


def test_malformed_ladder_exits_with_config_error(tmp_path):
    path = _config(tmp_path, {"mu_ladder": [1e-6, 1e-3]})
    result = CliRunner().invoke(main, ["model-bvp", "--config", path, "--out", str(tmp_path / "out")])
    assert result.exit_code == 2
    assert "decreasing" in result.output


def test_collision_point_is_a_solver_error(tmp_path):
    path = _config(tmp_path, {"threebody": {"points": [{"x": [0.0, 0.0], "y": [0.0, 0.0]}],
                                            "random_points": 0, "pullback_samples": 0}})
    result = CliRunner().invoke(main, ["threebody", "--config", path, "--out", str(tmp_path / "out")])
    assert result.exit_code == 3


def test_model_bvp_writes_outputs(tmp_path):
    out = tmp_path / "out"
    path = _config(tmp_path, {"mu_ladder": [1e-5, 1e-6], "model_bvp": {"T_values": [5.0]}})
    result = CliRunner().invoke(main, ["model-bvp", "--config", path, "--out", str(out), "--workers", "1"])
    assert result.exit_code == 0, result.output
    sweep = pd.read_csv(out / "energy_sweep.csv")
    assert sweep["T"].iloc[-1] == pytest.approx(0.5 * math.log(1e4), abs=1e-5)
    times = pd.read_csv(out / "time_sweep.csv")
    assert times["energy"].iloc[0] == pytest.approx(0.01 * math.exp(-10.0), rel=1e-6)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "model-bvp"
    assert "trajectory_smallest_mu.csv" in manifest["files"]
    assert (out / "summary.md").read_text().startswith("# Model BVP Summary")


def test_threebody_checks(tmp_path):
    out = tmp_path / "out"
    path = _config(tmp_path, {"threebody": {"random_points": 3, "pullback_samples": 5}})
    result = CliRunner().invoke(main, ["threebody", "--config", path, "--out", str(out), "--seed", "7"])
    assert result.exit_code == 0, result.output
    results = json.loads((out / "threebody.json").read_text())
    assert results["max_eigenvalue_error"] < 1e-6
    assert results["max_pullback_residual"] < 1e-10
    assert len(pd.read_csv(out / "eigenvalues.csv")) == 4
