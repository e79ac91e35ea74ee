import json

import numpy as np
import pandas as pd
import pytest
from src.hamiltonian import Dims, ModelSpec, PhaseState, build_model
from src.integrator import integrate
from src.report_generator import ReportGenerator, canonical_json, config_hash


def test_canonical_json_handles_numpy():
    text = canonical_json({"b": np.float64(1.5), "a": np.arange(3), "c": complex(1, -2)})
    data = json.loads(text)
    assert list(data) == ["a", "b", "c"]
    assert data["a"] == [0, 1, 2]
    assert data["c"] == {"real": 1.0, "imag": -2.0}


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 64


def test_generate_run_summary(tmp_path):
    reports = ReportGenerator(tmp_path)
    summary = reports.generate_run_summary("Model BVP", ["Fitted graphs", "Solved passages"], {"slope": 1.0})
    assert summary.startswith("# Model BVP Summary\n\n## Actions\n")
    assert "- Solved passages\n" in summary
    assert "## Results\n- slope: 1.0\n" in summary
    assert "## Results" not in reports.generate_run_summary("Empty", [])


def test_tables_and_manifest(tmp_path):
    reports = ReportGenerator(tmp_path / "run")
    reports.save_table([{"mu": 1e-3, "T": 3.45}, {"mu": 1e-4, "T": 4.6}], "sweep.csv")
    reports.save_json({"value": np.float64(2.0)}, "result.json")
    reports.save_report("# Summary\n")
    frame = pd.read_csv(tmp_path / "run" / "sweep.csv")
    assert list(frame.columns) == ["mu", "T"]
    assert frame["T"].tolist() == pytest.approx([3.45, 4.6])
    manifest_path = reports.write_manifest({"seed": 0}, "model-bvp", {"seed": 0})
    manifest = json.loads(manifest_path.read_text())
    assert manifest["command"] == "model-bvp"
    assert manifest["config_sha256"] == config_hash({"seed": 0})
    assert manifest["files"] == ["result.json", "summary.md", "sweep.csv"]
    assert set(manifest["versions"]) >= {"numpy", "scipy", "loguru"}


def test_save_trajectory(tmp_path):
    sys = build_model(ModelSpec(Dims(1, 1), lam=1.0))
    trajectory = integrate(sys, PhaseState.from_vector([0.0, 0.0, 0.1, 0.01], Dims(1, 1)), (0.0, 1.0))
    path = ReportGenerator(tmp_path).save_trajectory(trajectory, sys, "trajectory.csv", count=6)
    frame = pd.read_csv(path)
    assert len(frame) == 6
    assert frame["H"].tolist() == pytest.approx([-0.001] * 6, rel=1e-8)
