"""Command-line interface tests: subcommands, exit codes, run metadata."""

import json
import hashlib
from pathlib import Path

import numpy as np
import pytest

from rangepose.cli import main
from rangepose.sensing import BiasModel
from rangepose.simulator import ugv_three_agent

BIAS = BiasModel(coefficients=(0.15, 1e-3, 8e-5))


def _tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def _simulate(tmp_path, name, extra=()):
    out = tmp_path / name
    code = main(["simulate", "ugv_three_agent", "--duration", "2", "--seed", "6",
                 "-o", str(out), *extra])
    assert code == 0
    return out


class TestSimulate:
    def test_rerun_is_hash_equal(self, tmp_path):
        first = _simulate(tmp_path, "one")
        second = _simulate(tmp_path, "two")
        assert _tree_digest(first) == _tree_digest(second)
        meta = json.loads((first / "run_meta.json").read_text())
        assert meta["subcommand"] == "simulate"
        assert meta["seed"] == 6
        assert set(meta["versions"]) == {"python", "numpy", "pandas", "rangepose"}

    def test_seed_changes_measurements(self, tmp_path):
        base = _simulate(tmp_path, "one")
        other = tmp_path / "other"
        assert main(["simulate", "ugv_three_agent", "--duration", "2", "--seed", "7",
                     "-o", str(other)]) == 0
        assert (base / "ranges.csv").read_bytes() != (other / "ranges.csv").read_bytes()
        assert json.loads((other / "run_meta.json").read_text())["seed"] == 7

    def test_scenario_file_input(self, tmp_path):
        doc = tmp_path / "scenario.json"
        doc.write_text(ugv_three_agent(duration_s=1.0, seed=4).to_json())
        out = tmp_path / "out"
        assert main(["simulate", str(doc), "-o", str(out)]) == 0
        assert (out / "ranges.csv").exists()

    def test_missing_scenario_is_validation_error(self, tmp_path, capsys):
        code = main(["simulate", str(tmp_path / "nope.json"), "-o", str(tmp_path / "o")])
        assert code == 1
        assert "nope.json" in capsys.readouterr().err

    def test_no_writes_outside_output(self, tmp_path, monkeypatch):
        scratch = tmp_path / "cwd"
        scratch.mkdir()
        monkeypatch.chdir(scratch)
        _simulate(tmp_path, "out")
        assert list(scratch.iterdir()) == []


class TestFitBias:
    def _calibration_csv(self, tmp_path):
        rng = np.random.default_rng(9)
        elevations = np.linspace(-60.0, 60.0, 200)
        errors = BIAS.evaluate(elevations) + rng.normal(0.0, 1e-4, size=200)
        path = tmp_path / "calib.csv"
        lines = ["elevation_deg,error_m"]
        lines += [f"{float(e)!r},{float(v)!r}" for e, v in zip(elevations, errors)]
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_fit_recovers_generating_curve(self, tmp_path):
        out = tmp_path / "bias.json"
        code = main(["fit-bias", str(self._calibration_csv(tmp_path)), "-o", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        # Degree 6 is the default operating point.
        assert doc["model"]["degree"] == 6
        assert doc["diagnostics"]["rms_residual_m"] < 1e-3
        assert doc["diagnostics"]["sample_count"] == 200
        model = BiasModel.from_json(json.dumps(doc["model"]))
        grid = np.linspace(-55.0, 55.0, 23)
        assert np.max(np.abs(model.evaluate(grid) - BIAS.evaluate(grid))) < 1e-3
        assert doc["run_meta"]["subcommand"] == "fit-bias"

    def test_degree_flag(self, tmp_path):
        out = tmp_path / "bias.json"
        code = main(["fit-bias", str(self._calibration_csv(tmp_path)),
                     "--degree", "2", "-o", str(out)])
        assert code == 0
        assert json.loads(out.read_text())["model"]["degree"] == 2

    def test_missing_columns_fail(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("elevation_deg,bias\n0.0,0.1\n")
        assert main(["fit-bias", str(bad), "-o", str(tmp_path / "bias.json")]) == 1
        assert "error_m" in capsys.readouterr().err


class TestEstimateEvaluate:
    def test_estimate_writes_csv_and_rerun_matches(self, tmp_path):
        bundle = _simulate(tmp_path, "bundle")
        est1, est2 = tmp_path / "est1", tmp_path / "est2"
        assert main(["estimate", str(bundle), "-o", str(est1)]) == 0
        assert main(["estimate", str(bundle), "-o", str(est2)]) == 0
        assert _tree_digest(est1) == _tree_digest(est2)
        header = (est1 / "estimates.csv").read_text().splitlines()[0]
        assert header == ("time_s,meas_agent,targ_agent,x_m,y_m,z_m,"
                          "roll_deg,pitch_deg,yaw_deg,converged,objective,iterations")
        meta = json.loads((est1 / "run_meta.json").read_text())
        assert meta["subcommand"] == "estimate"
        assert meta["seed"] == 6

    def test_flag_overrides_change_config_hash(self, tmp_path):
        bundle = _simulate(tmp_path, "bundle")
        est1, est2 = tmp_path / "est1", tmp_path / "est2"
        assert main(["estimate", str(bundle), "-o", str(est1)]) == 0
        assert main(["estimate", str(bundle), "--no-huber", "-o", str(est2)]) == 0
        hash1 = json.loads((est1 / "run_meta.json").read_text())["config_hash"]
        hash2 = json.loads((est2 / "run_meta.json").read_text())["config_hash"]
        assert hash1 != hash2

    def test_evaluate_summary_to_stdout(self, tmp_path, capsys):
        bundle = _simulate(tmp_path, "bundle")
        est = tmp_path / "est"
        assert main(["estimate", str(bundle), "-o", str(est)]) == 0
        capsys.readouterr()
        assert main(["evaluate", str(est), "--truth", str(bundle)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == ("mean_ape_m,max_ape_m,std_ape_m,"
                          "mean_ahe_deg,max_ahe_deg,std_ahe_deg,count")
        cells = out[1].split(",")
        assert float(cells[0]) < 1.0
        assert int(cells[6]) > 0

    def test_full_pipeline_emits_eight_row_table(self, tmp_path):
        bundle = _simulate(tmp_path, "bundle")
        est = tmp_path / "est"
        assert main(["estimate", str(bundle), "-o", str(est)]) == 0
        table = tmp_path / "table.csv"
        code = main(["evaluate", str(est), "--truth", str(bundle),
                     "--ablation", "-o", str(table)])
        assert code == 0
        lines = table.read_text().splitlines()
        assert len(lines) == 9
        assert lines[0].startswith("el_bias,z_fixed,huber,")
        assert lines[-1].startswith("on,on,on,")
        assert (tmp_path / "table.txt").exists()
        assert (tmp_path / "run_meta.json").exists()

    def test_ablation_jobs_flag_matches_serial(self, tmp_path):
        bundle = _simulate(tmp_path, "bundle")
        est = tmp_path / "est"
        assert main(["estimate", str(bundle), "-o", str(est)]) == 0
        one = tmp_path / "one"
        two = tmp_path / "two"
        assert main(["evaluate", str(est), "--truth", str(bundle), "--ablation",
                     "-o", str(one)]) == 0
        assert main(["evaluate", str(est), "--truth", str(bundle), "--ablation",
                     "--jobs", "2", "-o", str(two)]) == 0
        assert (one / "table.csv").read_text() == (two / "table.csv").read_text()

    def test_corrupt_estimates_is_validation_error(self, tmp_path, capsys):
        bundle = _simulate(tmp_path, "bundle")
        est = tmp_path / "est"
        est.mkdir()
        (est / "estimates.csv").write_text("time_s,x_m\n0.0,1.0\n")
        assert main(["evaluate", str(est), "--truth", str(bundle)]) == 1
        assert "missing mandatory columns" in capsys.readouterr().err

    def test_corrupt_bundle_is_runtime_error(self, tmp_path, capsys):
        bundle = _simulate(tmp_path, "bundle")
        messages = (bundle / "messages.csv").read_text().splitlines()
        first = messages[1].split(",")
        first[-1] = "zzzz"
        messages[1] = ",".join(first)
        (bundle / "messages.csv").write_text("\n".join(messages) + "\n")
        est = tmp_path / "est"
        assert main(["estimate", str(bundle), "-o", str(est)]) == 2
        assert capsys.readouterr().err


class TestDopAndUsage:
    def test_dop_report_to_stdout(self, tmp_path, capsys):
        from rangepose.geometry import AntennaArray

        wide = tmp_path / "wide.json"
        wide.write_text(AntennaArray.ring(4, 3.0, 0.0).to_json())
        assert main(["dop", str(wide), "--target", "1.5,0.5,0.2"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["horizontal_dop"] > 0.0
        assert not doc["degenerate"]

    def test_bad_target_string(self, tmp_path, capsys):
        path = tmp_path / "a.json"
        from rangepose.geometry import AntennaArray

        path.write_text(AntennaArray.ring(4, 0.37, 0.0).to_json())
        assert main(["dop", str(path), "--target", "1.5,0.5"]) == 1
        assert main(["dop", str(path), "--target", "a,b,c"]) == 1
        assert capsys.readouterr().err

    def test_unknown_flag_prints_usage(self, capsys):
        assert main(["simulate", "ugv_three_agent", "-o", "x", "--turbo"]) == 1
        err = capsys.readouterr().err
        assert "usage" in err

    def test_unknown_subcommand(self, capsys):
        assert main(["transmogrify"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_bad_choice_value(self, tmp_path, capsys):
        assert main(["estimate", str(tmp_path), "-o", str(tmp_path / "e"),
                     "--z-source", "barometer"]) == 1
        assert "invalid choice" in capsys.readouterr().err
