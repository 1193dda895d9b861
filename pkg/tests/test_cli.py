import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from follicle_sim import artifacts
from follicle_sim.main import build_parser, main

from .conftest import default_param_values


# Fixtures
def write_config(directory: Path, param_changes=None, **run_changes) -> Path:
    params = default_param_values()
    params.update(T=0.02)
    params.update(param_changes or {})
    (directory / "params.json").write_text(json.dumps(params), encoding="utf-8")
    run = {
        "params": "params.json",
        "method": "fv",
        "output_resolution": 8,
        "output_times": [0.01, 0.02],
        "seed": 7,
        "initial_data": [
            {"follicle": 1, "component": "bar", "cycle": 1, "family": "bump", "center": [0.5, 0.5], "radius": [0.3, 0.3]},
            {"follicle": 2, "component": "hat", "cycle": 1, "family": "bump", "amplitude": 0.8, "center": [0.5, 0.5], "radius": [0.3, 0.3]},
            {"follicle": 2, "component": "tilde", "cycle": 2, "family": "gaussian", "amplitude": 0.5, "center": [0.5, 0.5], "width": [0.2, 0.2]},
        ],
        "solver": {"quad_order": 5, "quad_max_level": 2, "rk4_step": 2.5e-3, "resample_resolution": 64, "threads": 1},
        "verify": {"contraction_pairs": 2, "jacobian_segments": 10, "weak_test_functions": 2, "bound_samples": 200, "trace_samples": 8, "fv_resolution": 8, "fv_steps": 5},
    }
    run.update(run_changes)
    path = directory / "run.json"
    path.write_text(json.dumps(run), encoding="utf-8")
    return path


@pytest.fixture
def config(tmp_path: Path) -> Path:
    return write_config(tmp_path)


class TestParser:
    def test_subcommands(self):
        parser = build_parser()
        args = parser.parse_args(["converge", "--config", "run.json", "--resolutions", "8", "16", "32"])
        assert args.command == "converge"
        assert args.resolutions == ["8", "16", "32"]
        assert args.method == "fv"

    def test_config_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run"])


class TestExitCodes:
    def test_constants_printed(self, config, capsys):
        assert main(["constants", "--config", str(config), "--log-level", "WARNING"]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert set(printed) == {"K", "K1", "K2", "delta", "C1f", "C2f"}
        assert printed["K2"] > 0

    def test_config_error(self, tmp_path):
        path = write_config(tmp_path, plotting=True)
        assert main(["constants", "--config", str(path)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["constants", "--config", str(tmp_path / "absent.json")]) == 2

    def test_sign_hypothesis_violation(self, tmp_path):
        """A weak constant maturation term breaks the velocity signs"""
        path = write_config(tmp_path, param_changes={"c2": 0.1})
        assert main(["constants", "--config", str(path)]) == 3
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == 3


class TestRun:
    def test_fv_run_outputs(self, config, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", str(config), "--out", str(out)]) == 0
        series = pd.read_csv(out / "maturity_fv.csv")
        assert list(series.columns) == ["t", "M_1", "M_2", "M", "u_1", "u_2", "U", "method"]
        assert series["M"].to_numpy() == pytest.approx((series["M_1"] + series["M_2"]).to_numpy())
        snapshot = pd.read_csv(out / "snapshot_fv_001.csv")
        assert list(snapshot.columns) == ["t", "follicle", "component", "cycle", "x", "y", "value", "method"]
        assert len(snapshot) == 2 * 3 * 2 * 8 * 8
        assert (snapshot["t"] == 0.02).all()
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["csv_sha256"]["maturity_fv.csv"] == artifacts.sha256_file(out / "maturity_fv.csv")
        assert manifest["solver"]["quad_order"] == 5

    def test_csv_dialect(self, config, tmp_path):
        """Full-precision floats and CRLF line endings"""
        out = tmp_path / "out"
        main(["run", "--config", str(config), "--out", str(out)])
        raw = (out / "maturity_fv.csv").read_bytes()
        assert raw.startswith(b"t,M_1,M_2,M,u_1,u_2,U,method\r\n")

    def test_run_is_deterministic(self, config, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", str(config), "--out", str(first), "--method", "both", "--threads", "1"]) == 0
        assert main(["run", "--config", str(config), "--out", str(second), "--method", "both", "--threads", "3"]) == 0
        for name in ("maturity_char.csv", "maturity_fv.csv", "snapshot_char_000.csv", "snapshot_char_001.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_char_run_manifest(self, config, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", str(config), "--out", str(out), "--method", "char", "--dump-chains"]) == 0
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["bounds"]["passed"] is True
        assert manifest["windows"] and manifest["windows"][-1]["t_hi"] == pytest.approx(0.02)
        assert {"K", "K1", "K2", "delta"} <= set(manifest["constants"])
        chains = json.loads((out / "chains.json").read_text(encoding="utf-8"))["chains"]
        assert len(chains) == 2 * 2 * 3 * 2
        series = pd.read_csv(out / "maturity_char.csv")
        assert series["t"].iloc[-1] == pytest.approx(0.02)
        assert (series["method"] == "char").all()
        assert manifest["csv_sha256"]["controls_char.csv"] == artifacts.sha256_file(out / "controls_char.csv")

    def test_frozen_controls_run(self, config, tmp_path):
        """An open-loop schedule replaces the feedback controls"""
        times = np.array([0.0, 0.02])
        schedule = np.array([[0.7, 0.7], [0.8, 0.8], [0.9, 0.9]])
        frozen = tmp_path / "controls.csv"
        artifacts.frozen_controls_frame(times, schedule).to_csv(frozen, index=False)
        out = tmp_path / "out"
        assert main(["run", "--config", str(config), "--out", str(out), "--freeze-controls", str(frozen)]) == 0
        series = pd.read_csv(out / "maturity_fv.csv")
        assert series["u_1"].to_numpy() == pytest.approx(0.7)
        assert series["U"].to_numpy() == pytest.approx(0.9)

    def test_recorded_controls_replay(self, config, tmp_path):
        """Feeding the written FV controls back open-loop reproduces the feedback run"""
        first = tmp_path / "feedback"
        assert main(["run", "--config", str(config), "--out", str(first)]) == 0
        manifest = json.loads((first / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["csv_sha256"]["controls_fv.csv"] == artifacts.sha256_file(first / "controls_fv.csv")
        recorded = pd.read_csv(first / "controls_fv.csv")
        assert list(recorded.columns) == ["t", "u_1", "u_2", "U"]

        second = tmp_path / "replay"
        assert main(["run", "--config", str(config), "--out", str(second), "--freeze-controls", str(first / "controls_fv.csv")]) == 0
        feedback = pd.read_csv(first / "maturity_fv.csv")
        replay = pd.read_csv(second / "maturity_fv.csv")
        assert len(replay) == len(feedback)
        for column in ("t", "M_1", "M_2", "u_1", "u_2", "U"):
            assert replay[column].to_numpy() == pytest.approx(feedback[column].to_numpy(), rel=1e-12, abs=1e-300)


class TestConverge:
    def test_convergence_table(self, config, tmp_path):
        out = tmp_path / "out"
        assert main(["converge", "--config", str(config), "--out", str(out), "--resolutions", "16", "4", "8"]) == 0
        table = pd.read_csv(out / "convergence.csv")
        assert list(table.columns) == ["t", "h", "L1_error_vs_char", "maturity_error", "order_estimate", "maturity_order"]
        assert len(table) == 3 * 2
        assert table["h"].tolist() == [0.25, 0.25, 0.125, 0.125, 0.0625, 0.0625]
        assert table["order_estimate"].iloc[:2].isna().all()
        assert table["maturity_order"].iloc[:2].isna().all()
        assert (table["L1_error_vs_char"] > 0).all()

    def test_first_order_convergence(self, tmp_path):
        """Density and maturity errors of the upwind scheme shrink at least linearly"""
        config = write_config(tmp_path, {"T": 0.05}, output_times=[0.05])
        out = tmp_path / "out"
        assert main(["converge", "--config", str(config), "--out", str(out), "--resolutions", "32", "64", "128"]) == 0
        table = pd.read_csv(out / "convergence.csv")
        assert len(table) == 3
        assert table["L1_error_vs_char"].is_monotonic_decreasing
        assert table["maturity_error"].is_monotonic_decreasing
        assert table["order_estimate"].iloc[-1] >= 0.8
        assert table["maturity_order"].iloc[-1] >= 0.8

    def test_too_few_resolutions(self, config, tmp_path):
        assert main(["converge", "--config", str(config), "--out", str(tmp_path), "--resolutions", "8", "16"]) == 2


class TestVerify:
    def test_every_property_passes(self, tmp_path):
        """On smooth data the whole property suite passes and the command exits 0"""
        smooth = [
            {"follicle": 1, "component": "bar", "cycle": 1, "family": "gaussian", "center": [0.5, 0.5], "width": [0.1, 0.1]},
            {"follicle": 2, "component": "hat", "cycle": 1, "family": "gaussian", "amplitude": 0.8, "center": [0.5, 0.5], "width": [0.1, 0.1]},
            {"follicle": 2, "component": "tilde", "cycle": 2, "family": "gaussian", "amplitude": 0.5, "center": [0.5, 0.5], "width": [0.1, 0.1]},
        ]
        config = write_config(tmp_path, initial_data=smooth)
        out = tmp_path / "out"
        code = main(["verify", "--config", str(config), "--out", str(out)])
        report = json.loads((out / "verify_report.json").read_text(encoding="utf-8"))
        failed = [name for name, result in report["properties"].items() if not result["passed"]]
        assert failed == []
        assert report["passed"] is True
        assert code == 0
        expected = {
            "contraction",
            "fixed_point",
            "jacobian",
            "weak_residual",
            "bounds",
            "trace_compatibility",
            "phase2_exactness",
            "maturity_consistency",
            "continuity",
            "linearity",
            "mass_audit",
            "doubling_audit",
        }
        assert set(report["properties"]) == expected
        assert report["properties"]["linearity"]["skipped"] == "controls are not frozen"
        assert report["properties"]["weak_residual"]["perturbed_residuals"]
