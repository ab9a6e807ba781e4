import json
import subprocess
import sys

import pytest

from uhdvit import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(capsys, *argv):
    code, out, _ = run(capsys, "--json", *argv)
    return code, json.loads(out)


def test_plan_examples(capsys):
    code, rep = run_json(capsys, "plan", "1344", "448", "--max-slices", "9")
    assert code == 0 and rep["grid"] == {"rows": 1, "cols": 3}
    code, rep = run_json(capsys, "plan", "448", "448", "--max-slices", "1")
    assert code == 0 and rep["grid"] == {"rows": 1, "cols": 1} and len(rep["views"]) == 2
    code, out, _ = run(capsys, "plan", "448", "448")
    assert "grid 3x3" in out


def test_plan_invalid_dims(capsys):
    code, _, err = run(capsys, "plan", "448", "448", "--view-px", "450")
    assert code == 2 and "multiple" in err


def test_malformed_args_exit_2():
    proc = subprocess.run([sys.executable, "-m", "uhdvit", "plan", "abc"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "uhdvit", "check-init", "--trials", "0"], capture_output=True, text=True)
    assert proc.returncode == 2


def test_encode_counts_and_determinism(capsys):
    code, a = run_json(capsys, "encode")
    assert code == 0
    assert [s["tokens"] for s in a["stage_tokens"]] == [32, 8, 2]
    assert [s["stage"] for s in a["stage_tokens"]] == ["patches", "encoder", "connector"]
    _, b = run_json(capsys, "encode")
    assert a == b
    _, c = run_json(capsys, "encode", "--variant", "avg_pool")
    assert c["stage_tokens"] == a["stage_tokens"] and c["checksum"] != a["checksum"]


def test_encode_seed_position_and_change(capsys):
    _, a = run_json(capsys, "--seed", "7", "encode")
    _, b = run_json(capsys, "encode", "--seed", "7")
    _, c = run_json(capsys, "encode", "--seed", "8")
    assert a["checksum"] == b["checksum"] != c["checksum"]


def test_encode_threads_env(capsys, monkeypatch):
    _, a = run_json(capsys, "encode", "--threads", "1")
    monkeypatch.setenv("UHD_THREADS", "4")
    _, b = run_json(capsys, "encode", "--threads", "4")
    assert a["checksum"] == b["checksum"]


def test_encode_f64_differs(capsys):
    _, a = run_json(capsys, "encode")
    _, b = run_json(capsys, "encode", "--f64")
    assert b["dtype"] == "float64" and a["checksum"] != b["checksum"]


def test_encode_weights_roundtrip(capsys, tmp_path):
    p = tmp_path / "toy.uhdw"
    _, a = run_json(capsys, "encode", "--save-weights", str(p))
    _, b = run_json(capsys, "encode", "--weights", str(p))
    assert p.exists() and a["checksum"] == b["checksum"]


def test_config_file_and_flag_override(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"variant": "avg_pool", "seed": 3, "connector": {"kind": "mlp", "ratio": 4, "out_dim": 16}}))
    _, a = run_json(capsys, "--config", str(cfg), "encode")
    assert a["config"]["variant"] == "avg_pool" and a["config"]["seed"] == 3
    assert a["config"]["connector"]["out_dim"] == 16
    _, b = run_json(capsys, "--config", str(cfg), "encode", "--variant", "win_attn_mlp", "--seed", "4")
    assert b["config"]["variant"] == "win_attn_mlp" and b["config"]["seed"] == 4


def test_bad_config(capsys, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"n_heads": 5}}))
    code, _, err = run(capsys, "--config", str(cfg), "encode")
    assert code == 2 and err
    code, _, _ = run(capsys, "--config", str(tmp_path / "missing.json"), "encode")
    assert code == 2


def test_output_file(capsys, tmp_path):
    out = tmp_path / "r.json"
    code, _, _ = run(capsys, "flops", "--output", str(out))
    assert code == 0 and "reduction_pct" in json.loads(out.read_text())


def test_check_init_pass(capsys):
    code, out, _ = run(capsys, "check-init")
    assert code == 0 and "PASS" in out and "max rel err" in out
    code, rep = run_json(capsys, "check-init", "--f64", "--trials", "20")
    assert code == 0 and rep["max_rel_err"] <= 1e-12


def test_check_init_informational(capsys):
    code, rep = run_json(capsys, "check-init", "--strict-surrogate", "off", "--trials", "10")
    assert code == 0 and rep["surrogate_vs_production_rel"] > 0


def test_check_init_failure_dumps_window(capsys, monkeypatch):
    import numpy as np

    import uhdvit.verify as verify

    monkeypatch.setitem(verify.TOLERANCE, np.dtype(np.float32), 0.0)
    code, rep = run_json(capsys, "check-init", "--trials", "3")
    assert code == 1 and len(rep["worst_window"]) == 4


def test_flops_reports(capsys):
    code, rep = run_json(capsys, "flops", "--variant", "win_attn_reused_mlp", "--k", "6")
    assert code == 0 and 51 <= rep["reduction_pct"] <= 61
    code, rep = run_json(capsys, "flops", "--sweep", "3,6,9,15")
    assert rep["affinity_residual_rel"] < 1e-9
    assert rep["slope_gflops"] == pytest.approx(rep["expected_slope_gflops"], rel=1e-9)
    code, rep = run_json(capsys, "flops", "--deltas")
    assert rep["window_delta_equal"] and rep["reuse_delta_equal"]
    code, rep = run_json(capsys, "flops", "--width", "896", "--height", "896", "--max-slices", "4", "--ge-budget", str(4 * 448 * 448))
    assert rep["ge"]["quadratic_share"] > rep["se"]["quadratic_share"]
    code, out, _ = run(capsys, "flops", "--mac-factor", "1", "--include-norm-softmax")
    assert code == 0 and "mac_factor=1" in out


def test_flops_bad_k(capsys):
    code, _, err = run(capsys, "flops", "--k", "27")
    assert code == 2 and "insertion_depth" in err


def test_ablate(capsys):
    code, rep = run_json(capsys, "ablate")
    assert code == 0
    rows = rep["rows"]
    assert [r["variant"] for r in rows] == [
        "avg_pool", "pixel_unshuffle_mlp", "reused_mlp", "cross_attn_topleft",
        "cross_attn_mean", "win_attn_mlp", "win_attn_reused_mlp",
    ]
    assert all(r["final_tokens"] == 2 and r["locality"] == "pass" for r in rows)
    by = {r["variant"]: r["gflops"] for r in rows}
    assert by["avg_pool"] == min(by.values())
    assert by["reused_mlp"] > by["pixel_unshuffle_mlp"]
    _, again = run_json(capsys, "ablate")
    assert again == rep
