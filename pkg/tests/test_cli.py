import json
import socket
import subprocess
import sys

import numpy as np
import pytest

from sadmm.cli import EXIT_DATA, EXIT_OK, EXIT_SOLVER, EXIT_TRANSPORT, EXIT_USAGE, main
from sadmm.dataio import read_metrics


def make_config(tmp_path, **solver):
    cfg = {
        "schema_version": 1,
        "dataset": {"source": "synthetic_power_plant", "seed": 0, "n_rows": 300},
        "model": {"kind": "linear_features", "input_dim": 4, "output_dim": 1, "basis": "quadratic"},
        "solver": {"n_workers": 4, "rho": 1.0, "reg": "l1", "omega": 0.01, "max_iter": 8, "early_stop": False,
                   **solver},
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_writes_metrics_and_echoes_overrides(tmp_path, capsys):
    cfg = make_config(tmp_path)
    assert main(["run", str(cfg), "--rho", "2", "--seed", "5", "--mode", "admm"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("admm: status=max_iter iterations=8 ")
    for key in ("r=", "s=", "aug_lagrangian=", "nlp_solves=32", "wall="):
        assert key in out
    rows = read_metrics(tmp_path / "out" / "metrics_admm.csv")
    assert len(rows) == 8 and rows[0]["mode"] == "eeee"
    meta = json.loads((tmp_path / "out" / "metrics_admm.csv.meta.json").read_text())
    assert meta["overrides"] == {"rho": 2.0, "seed": 5, "mode": "admm"}
    assert meta["config"]["solver"]["rho"] == 2.0 and meta["config"]["solver"]["rng_seed"] == 5
    assert {"mse", "r2"} <= set(meta["fit"])


def test_compare_runs_all_modes_from_same_start(tmp_path, capsys):
    cfg = make_config(tmp_path)
    assert main(["compare", str(cfg), "--modes", "admm,sadmm,ssadmm,ladmm"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split(":")[0] for l in lines] == ["admm", "sadmm", "ssadmm", "ladmm"]
    starts = []
    for m in ("admm", "sadmm", "ssadmm", "ladmm"):
        meta = json.loads((tmp_path / "out" / f"metrics_{m}.csv.meta.json").read_text())
        starts.append(meta["config"]["solver"]["rng_seed"])
        assert (tmp_path / "out" / f"metrics_{m}.csv").exists()
    assert len(set(starts)) == 1
    # quadratic model: first iterations agree across exact and sensitivity modes
    a = read_metrics(tmp_path / "out" / "metrics_admm.csv")
    b = read_metrics(tmp_path / "out" / "metrics_sadmm.csv")
    assert a[0]["aug_lagrangian"] == b[0]["aug_lagrangian"]


def test_usage_errors(tmp_path, capsys):
    assert main(["run"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    assert main([]) == EXIT_USAGE
    assert main(["compare", str(make_config(tmp_path)), "--modes", "admm,turbo"]) == EXIT_USAGE
    assert main(["check", "everything"]) == EXIT_USAGE


def test_serve_worker_needs_master(monkeypatch):
    monkeypatch.delenv("SADMM_MASTER", raising=False)
    assert main(["serve-worker", "--worker-id", "0"]) == EXIT_USAGE
    monkeypatch.setenv("SADMM_MASTER", "nonsense")
    assert main(["serve-worker", "--worker-id", "0"]) == EXIT_USAGE


def test_data_errors(tmp_path):
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == EXIT_DATA
    assert main(["run", str(make_config(tmp_path, rho=-1.0))]) == EXIT_DATA


def test_solver_error_exit(tmp_path):
    cfg = make_config(tmp_path, mode="admm", newton_tol=1e-300)
    assert main(["run", str(cfg)]) == EXIT_SOLVER


def test_transport_error_exit():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    # nothing listens on the port
    assert main(["serve-worker", "--master", f"127.0.0.1:{port}", "--worker-id", "0",
                 "--connect-timeout", "0.2"]) == EXIT_TRANSPORT


def test_check_suites_wired(capsys):
    assert main(["check", "gradcheck", "--seeds", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS grad/mlp_regressor" in out and "gradcheck: all passed" in out


def test_bench_prints_ratio(tmp_path, capsys):
    cfg = make_config(tmp_path, mode="sadmm", R=10.0)
    assert main(["bench", str(cfg)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "exact solves: 4" in out and "median time ratio" in out


def test_no_timing_zeroes_wall_times(tmp_path):
    cfg = make_config(tmp_path)
    assert main(["run", str(cfg), "--no-timing"]) == EXIT_OK
    rows = read_metrics(tmp_path / "out" / "metrics_sadmm.csv")
    assert all(r["max_worker_wall_time_s"] == 0.0 for r in rows)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sadmm.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "serve-worker" in proc.stdout


def test_tcp_run_matches_loopback(tmp_path):
    cfg = make_config(tmp_path)
    assert main(["run", str(cfg), "--no-timing", "--out", str(tmp_path / "lo")]) == EXIT_OK
    assert main(["run", str(cfg), "--no-timing", "--transport", "tcp", "--out", str(tmp_path / "tcp")]) == EXIT_OK
    a = (tmp_path / "lo" / "metrics_sadmm.csv").read_bytes()
    b = (tmp_path / "tcp" / "metrics_sadmm.csv").read_bytes()
    assert a == b
    ma = json.loads((tmp_path / "lo" / "metrics_sadmm.csv.meta.json").read_text())
    mb = json.loads((tmp_path / "tcp" / "metrics_sadmm.csv.meta.json").read_text())
    assert np.array_equal(ma["x0_final"], mb["x0_final"])
