"""End-to-end command flows driven in process through ``cli.main``."""

import json

import numpy as np
import pytest

from aquant import error_analysis
from aquant.cli import main
from aquant.storage import save_dataset, save_model, stable_hash
from aquant.synth import make_dataset, make_toy_model


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    rc = main(["gen", "--out", str(root), "--seed", "3",
               "--calib-samples", "96", "--eval-samples", "48"])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def calibrated(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("calout")
    rc = main(["calibrate", "--model", str(workspace / "model"),
               "--data", str(workspace / "calib"),
               "--out", str(out), "--iters", "6", "--batch-size", "16"])
    assert rc == 0
    return out


def test_gen_writes_model_and_datasets(workspace):
    for sub in ("model", "calib", "eval"):
        assert (workspace / sub / "manifest.json").is_file()
    meta = json.loads((workspace / "gen.json").read_text())
    assert meta["config"]["seed"] == 3
    assert meta["config_sha256"] == stable_hash(meta["config"])


def test_calibrate_writes_summary_and_log(calibrated):
    summary = json.loads((calibrated / "summary.json").read_text())
    assert summary["config"]["iters"] == 6
    units = summary["summary"]["units"]
    assert all({"unit", "layers", "initial_loss", "final_loss"} <= set(u) for u in units)
    lines = (calibrated / "training_log.csv").read_text().splitlines()
    assert lines[0].startswith("# seed=0 config_sha256=")
    assert lines[1].split(",")[:3] == ["unit", "iter", "loss"]
    assert len(lines) == 2 + 6 * len(units)
    assert (calibrated / "model" / "manifest.json").is_file()


def test_calibrate_reports_are_byte_identical(workspace, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(["calibrate", "--model", str(workspace / "model"),
                   "--data", str(workspace / "calib"),
                   "--out", str(out), "--iters", "4", "--seed", "9"])
        assert rc == 0
        outs.append(out)
    for fname in ("summary.json", "training_log.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_config_file_loses_to_explicit_flags(workspace, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"iters": 5, "bits_w": 3, "fusion": True}))
    out = tmp_path / "out"
    rc = main(["calibrate", "--model", str(workspace / "model"),
               "--data", str(workspace / "calib"), "--out", str(out),
               "--config", str(cfg_path), "--iters", "2"])
    assert rc == 0
    cfg = json.loads((out / "summary.json").read_text())["config"]
    assert cfg["iters"] == 2          # explicit flag wins
    assert cfg["bits_w"] == 3         # file beats the default of 2
    assert cfg["fusion"] is True
    assert cfg["batch_size"] == 32    # untouched default


def test_reject_increase_flag_lands_in_config(workspace, tmp_path):
    out = tmp_path / "out"
    rc = main(["calibrate", "--model", str(workspace / "model"),
               "--data", str(workspace / "calib"), "--out", str(out),
               "--iters", "3", "--reject-increase"])
    assert rc == 0
    cfg = json.loads((out / "summary.json").read_text())["config"]
    assert cfg["reject_increase"] is True
    summary = json.loads((out / "summary.json").read_text())["summary"]
    for unit in summary["units"]:
        assert unit["final_loss"] <= unit["initial_loss"] + 1e-12


def test_unknown_config_key_exits_2(workspace, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"learning_rate": 0.1}))
    rc = main(["calibrate", "--model", str(workspace / "model"),
               "--data", str(workspace / "calib"), "--out", str(tmp_path / "o"),
               "--config", str(cfg_path)])
    assert rc == 2


def test_malformed_config_file_exits_2(workspace, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text("nope{")
    rc = main(["calibrate", "--model", str(workspace / "model"),
               "--data", str(workspace / "calib"), "--out", str(tmp_path / "o"),
               "--config", str(cfg_path)])
    assert rc == 2


def test_missing_model_dir_exits_2(workspace, tmp_path):
    rc = main(["calibrate", "--model", str(tmp_path / "nothing"),
               "--data", str(workspace / "calib"), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_bad_border_choice_is_an_argparse_error(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["calibrate", "--model", str(workspace / "model"),
              "--data", str(workspace / "calib"), "--out", str(tmp_path / "o"),
              "--border", "cubic"])
    assert exc.value.code == 2


def test_evaluate_reports_baseline_and_models(workspace, calibrated, tmp_path, capsys):
    out = tmp_path / "rep"
    rc = main(["evaluate", "--model", str(calibrated / "model"),
               "--model", str(calibrated / "model"),
               "--data", str(workspace / "eval"), "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["reports"]) == {"baseline", "model", "model-2"}
    for rep in report["reports"].values():
        assert rep["e2e_mse"] >= 0.0
        assert all("superior_ratio" in layer for layer in rep["layers"])
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    assert sum(1 for ln in lines if ",e2e," in ln) == 3
    assert "baseline: e2e mse" in capsys.readouterr().out


def test_oracle_clean_run(tmp_path, capsys):
    out = tmp_path / "oracle"
    rc = main(["oracle", "--pairs", "40", "--grid", "101", "--trials", "25",
               "--seed", "5", "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "oracle.json").read_text())
    assert report["violations"] == 0
    assert report["theorem"]["checked"] > 0
    assert "0 violations" in capsys.readouterr().out


def test_oracle_flags_mirrored_border(monkeypatch):
    orig = error_analysis.analytic_border_vec

    def mirrored(w, dw, x):
        return 1.0 - orig(w, dw, x)

    monkeypatch.setattr(error_analysis, "analytic_border_vec", mirrored)
    rc = main(["oracle", "--pairs", "20", "--grid", "101", "--trials", "5"])
    assert rc == 3


def test_overhead_table_and_report(workspace, tmp_path, capsys):
    out = tmp_path / "oh"
    rc = main(["overhead", "--model", str(workspace / "model"),
               "--border", "quadratic", "--bits-w", "2", "--out", str(out)])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "total: param ratio" in stdout
    report = json.loads((out / "overhead.json").read_text())
    assert report["totals"]["param_ratio"].count("/") == 1
    assert all(row["border_params"] >= 0 for row in report["layers"])


def test_divergent_calibration_exits_4(tmp_path):
    model = make_toy_model(seed=0)
    x, y = make_dataset(model, 64, seed=0)
    save_model(tmp_path / "model", model)
    save_dataset(tmp_path / "big", x * 1e160, y)
    with np.errstate(over="ignore", invalid="ignore"):
        rc = main(["calibrate", "--model", str(tmp_path / "model"),
                   "--data", str(tmp_path / "big"),
                   "--out", str(tmp_path / "out"), "--iters", "4"])
    assert rc == 4
