import json
import subprocess
import sys

import pytest

from vitptq.cli import main
from vitptq.reports import read_csv

FAST = ["--iters", "3", "--calib-size", "32", "--batch-size", "8"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "calib"), "--n", "48", "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(root / "eval"), "--n", "40", "--seed", "2"]) == 0
    return root


def test_quantize_writes_checkpoint_report_and_timings(data, tmp_path, capsys):
    out, rep = tmp_path / "q.ckpt", tmp_path / "run.json"
    code = main(["quantize", "--calib", str(data / "calib"), "--wbits", "3", "--abits", "3", "--loss", "aph",
                 "--mlp-recon", "--mr-iters", "2", "--eval", str(data / "eval"), "--out", str(out),
                 "--report", str(rep)] + FAST)
    assert code == 0
    r = json.loads(rep.read_text())
    assert r["enable_mr"] and r["config"]["weight_bits"] == 3 and r["config"]["loss_kind"] == "aph"
    assert {"config_hash", "seed", "accuracy", "fp_accuracy"} <= set(r)
    assert "total" in json.loads((tmp_path / "run.timings.json").read_text())
    assert "accuracy" in capsys.readouterr().out
    assert main(["eval", "--model", str(out), "--data", str(data / "eval")]) == 0


def test_quantize_is_byte_deterministic(data, tmp_path):
    paths = []
    for k in range(2):
        out, rep = tmp_path / f"q{k}.ckpt", tmp_path / f"r{k}.json"
        assert main(["quantize", "--calib", str(data / "calib"), "--out", str(out), "--report", str(rep),
                     "--seed", "4"] + FAST) == 0
        paths.append((out, rep))
    assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
    assert paths[0][1].read_bytes() == paths[1][1].read_bytes()


def test_compare_losses_four_rows(data, tmp_path):
    out = tmp_path / "cmp.csv"
    assert main(["compare-losses", "--wbits", "3", "--abits", "3", "--calib", str(data / "calib"),
                 "--eval", str(data / "eval"), "--out", str(out)] + FAST) == 0
    rows = read_csv(out)
    assert [r["loss"] for r in rows] == ["mse", "bh", "ph", "aph"]
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 and r["config_hash"] for r in rows)


def test_export_hessian(data, tmp_path):
    assert main(["export-hessian", "--calib", str(data / "calib"), "--calib-size", "16", "--block", "0",
                 "--out-dir", str(tmp_path)]) == 0
    tokens = read_csv(tmp_path / "token_importance.csv")
    channels = read_csv(tmp_path / "channel_importance.csv")
    assert len(tokens) == 17 and len(channels) == 64
    assert list(tokens[0]) == ["config_hash", "seed", "block", "token", "importance"]


def test_export_ranges(data, tmp_path):
    out = tmp_path / "ranges.csv"
    assert main(["export-ranges", "--calib", str(data / "calib"), "--calib-size", "16", "--mlp-recon",
                 "--mr-iters", "2", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert {r["stage"] for r in rows} == {"full_precision", "after_mr"}
    assert len(rows) == 2 * 4 * 8
    fc2 = [r for r in rows if r["point"] == "fc2_in" and r["stage"] == "after_mr"]
    assert all(r["activation"] == "relu" and float(r["min"]) >= 0 for r in fc2)


def test_probe_variance(data, tmp_path):
    out, curves = tmp_path / "probe.json", tmp_path / "curves.csv"
    assert main(["probe-variance", "--calib", str(data / "calib"), "--calib-size", "32", "--trials", "2",
                 "--minibatches", "3", "--curve-iters", "4", "--out", str(out), "--curves", str(curves)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["trials"]) == 2 and "config_hash" in rep
    assert len(read_csv(curves)) == 4


@pytest.mark.parametrize("argv,flag", [
    (["quantize", "--out", "x.ckpt"], "--calib"),
    (["quantize", "--calib", "/nonexistent/dir", "--out", "x.ckpt"], "--calib"),
    (["eval"], "--data"),
    (["compare-losses", "--calib", "/nonexistent", "--out", "x.csv"], "--eval"),
    (["export-hessian"], "--out-dir"),
    (["export-ranges"], "--out"),
    (["probe-variance"], "--out"),
])
def test_missing_paths_exit_1_naming_flag(argv, flag, capsys):
    assert main(argv) == 1
    assert flag in capsys.readouterr().err


def test_bad_flag_values_exit_1(data, capsys):
    assert main(["quantize", "--loss", "l1"]) == 1
    assert main(["quantize", "--calib", str(data / "calib"), "--out", "x", "--wbits", "12"]) == 1
    assert main(["nonsense"]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exit_1(data, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"reconstruction": {"wbits": 3}}))
    assert main(["quantize", "--config", str(cfg), "--calib", str(data / "calib"), "--out", "x"]) == 1
    assert "wbits" in capsys.readouterr().err


def test_too_small_calibration_exit_1(data, capsys):
    assert main(["quantize", "--calib", str(data / "calib"), "--out", "x", "--calib-size", "100"]) == 1
    assert "100 requested" in capsys.readouterr().err


def test_runtime_failure_exit_2(data, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"reconstruction": {"lr_activation_scale": 0.5, "lr_weight_rounding": 0.0,
                                                  "divergence_factor": 1.01, "round_reg_weight": 0.0,
                                                  "loss_kind": "mse", "max_iterations": 200,
                                                  "calibration_size": 32}}))
    assert main(["quantize", "--config", str(cfg), "--calib", str(data / "calib"), "--out",
                 str(tmp_path / "q.ckpt")]) == 2
    assert "DivergenceError" in capsys.readouterr().err


def test_config_file_paths_used(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"reconstruction": {"max_iterations": 2, "calibration_size": 16, "batch_size": 8},
                               "paths": {"calibration": str(data / "calib"), "output": str(tmp_path / "q.ckpt")}}))
    assert main(["quantize", "--config", str(cfg)]) == 0
    assert (tmp_path / "q.ckpt").exists()


def test_module_entry_point_exit_codes():
    ok = subprocess.run([sys.executable, "-m", "vitptq", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "quantize" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "vitptq", "eval"], capture_output=True, text=True)
    assert bad.returncode == 1 and "--data is required" in bad.stderr
