"""End-to-end acceptance criteria.

Each test reports one ``criterion N: PASS|FAIL ...`` line (also collected
in the terminal summary). The regression benchmark runs are cached per
module, so criteria 2, 5 and 7 share them.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from sadmm import checks
from sadmm.checks import assumption_rho, ridge_problem
from sadmm.consensus import SolverConfig, run
from sadmm.dataio import build_problem, fit_metrics, load_dataset, load_run_config, normalize
from sadmm.models import FunctionObjective, ShardObjective
from sadmm.subproblem import ParamBlock, WorkerState, accept, solve_exact, tangential_predict
from sadmm.theory import check_convergence_theory, quadratic_estimates
from sadmm.transport import LoopbackTransport

pytestmark = pytest.mark.acceptance

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
REGRESSION = os.path.join(ROOT, "configs", "regression.json")


class Benchmark:
    """Lazily computed regression-benchmark runs keyed by (mode, seed, D)."""

    def __init__(self):
        self.cfg = load_run_config(REGRESSION)
        self.problem, _ = build_problem(self.cfg)
        self.ds, _ = normalize(load_dataset(self.cfg.dataset), labels=self.cfg.normalize_labels)
        self.runs = {}

    def get(self, mode, seed, D=None):
        key = (mode, seed, D)
        if key not in self.runs:
            d = self.cfg.solver.to_dict()
            d.update(mode=mode, rng_seed=seed)
            if D is not None:
                d["D"] = D
            cfg = SolverConfig.from_dict(d)
            res = run(cfg, self.problem, LoopbackTransport())
            res.fit = fit_metrics(self.cfg.model, res.state.x0, self.ds)
            self.runs[key] = res
        return self.runs[key]


@pytest.fixture(scope="module")
def bench():
    return Benchmark()


def test_c1_quadratic_exactness(criterion_report):
    prob = ridge_problem()
    assert prob.n_params == 10 and len(prob.shards) == 4
    t0 = time.perf_counter()
    traces = {}
    for mode in ("admm", "sadmm"):
        cfg = SolverConfig(rho=1.0, mode=mode, max_iter=100, early_stop=False)
        traces[mode] = run(cfg, prob, LoopbackTransport()).trace
    elapsed = time.perf_counter() - t0
    diff = max(
        max(np.max(np.abs(a.xs - b.xs)), np.max(np.abs(a.x0 - b.x0)), np.max(np.abs(a.lams - b.lams)))
        for a, b in zip(traces["admm"], traces["sadmm"])
    )
    sens = sum(m in "pc" for r in traces["sadmm"] for m in r.worker_modes)
    ok = len(traces["sadmm"]) == 100 and diff <= 1e-8 and elapsed < 5.0
    criterion_report(1, ok, f"max |admm - sadmm| = {diff:.2e} over 100 iterations "
                            f"({sens} sensitivity updates), runtime {elapsed:.2f}s")
    assert ok


@pytest.mark.parametrize("D", [0.01, 0.005])
def test_c2_tolerance_contract(bench, criterion_report, D):
    violations = sens_updates = fallbacks = correctors = 0
    worst = 0.0
    for seed in range(5):
        for rec in bench.get("sadmm", seed, D).trace:
            for m, eps, fb in zip(rec.worker_modes, rec.worker_eps, rec.fallbacks):
                fallbacks += int(fb)
                if m in "pc":
                    sens_updates += 1
                    worst = max(worst, eps)
                    violations += int(eps > D)
                correctors += m == "c"
    ok = violations == 0 and sens_updates > 0
    criterion_report(2, ok, f"D = {D}: {violations} violations in {sens_updates} sensitivity updates over 5 seeds, "
                            f"worst eps {worst:.4g}, corrected updates {correctors}, fallbacks {fallbacks}")
    assert ok


def test_c3_second_order_predictor_error(criterion_report):
    # 1-D nonquadratic loss: J(x) = x^4/4 + x^2/2 + sin x
    J = FunctionObjective(
        lambda x: 0.25 * x[0] ** 4 + 0.5 * x[0] ** 2 + np.sin(x[0]),
        lambda x: np.array([x[0] ** 3 + x[0] + np.cos(x[0])]),
        lambda x: np.array([[3 * x[0] ** 2 + 1 - np.sin(x[0])]]),
        dim=1,
    )
    rho = 1.0
    p0 = ParamBlock([0.5], [0.2])
    base = WorkerState(J, np.zeros(1))
    base = accept(base, solve_exact(base, p0, rho, tol=1e-14), p0)
    steps, errors = [], []
    for j in range(5):
        t = 0.4 * 0.5**j
        p = ParamBlock(p0.x0 + t, p0.lam - 0.5 * t)
        pred = tangential_predict(base, p, rho)
        exact = solve_exact(WorkerState(J, pred), p, rho, tol=1e-14).x_out
        steps.append(np.linalg.norm(p.stacked() - p0.stacked()))
        errors.append(abs(pred[0] - exact[0]))
    slope = float(np.polyfit(np.log(steps), np.log(errors), 1)[0])
    ratios = [a / b for a, b in zip(errors, errors[1:])]
    ok = 1.8 <= slope <= 2.2
    criterion_report(3, ok, f"log-log slope {slope:.3f} over 4 halvings (error ratios "
                            + ", ".join(f"{r:.2f}" for r in ratios) + ")")
    assert ok


def test_c4_convergence_theory(criterion_report):
    prob = ridge_problem()
    objs = [ShardObjective(prob.spec, s) for s in prob.shards]
    rho = assumption_rho(quadratic_estimates(objs, SolverConfig()))
    parts, ok = [], True
    for reg, omega in (("none", 0.0), ("l1", 0.01), ("l2", 0.5)):
        cfg = SolverConfig(rho=rho, reg=reg, omega=omega, mode="sadmm", max_iter=200, early_stop=False)
        est = quadratic_estimates(objs, cfg)
        trace = run(cfg, prob, LoopbackTransport()).trace
        rep = check_convergence_theory(trace, est, cfg, objs)
        ok = ok and rep.ok and len(trace) == 200
        parts.append(f"{reg}: {rep.summary()}")
    criterion_report(4, ok, f"rho = {rho:g}; " + "; ".join(parts))
    assert ok


def test_c5_computational_saving(bench, criterion_report):
    sadmm = bench.get("sadmm", 0)
    admm = bench.get("admm", 0)
    exact_t, sens_t = [], []
    engaged = False
    for rec in sadmm.trace:
        engaged = engaged or any(m in "pc" for m in rec.worker_modes)
        for m, t in zip(rec.worker_modes, rec.worker_times):
            if m == "e":
                exact_t.append(t)
            elif engaged:
                sens_t.append(t)
    ratio = float(np.median(sens_t) / np.median(exact_t))
    n_s = sum(r.nlp_solves for r in sadmm.trace)
    n_a = sum(r.nlp_solves for r in admm.trace)
    time_ok = ratio <= 0.1
    count_ok = n_s <= 0.1 * n_a
    criterion_report(
        5, time_ok and count_ok,
        f"median sensitivity/exact worker time {ratio:.3f} (target <= 0.1: {'met' if time_ok else 'NOT met'}; "
        f"{np.median(sens_t) * 1e3:.1f} ms over {len(sens_t)} updates vs {np.median(exact_t) * 1e3:.1f} ms over "
        f"{len(exact_t)} exact solves); exact solves sadmm/admm {n_s}/{n_a} = {n_s / n_a:.3f} "
        f"(target <= 0.1: {'met' if count_ok else 'NOT met'})",
    )
    assert count_ok
    assert time_ok


def test_c6_stochastic_schedule(criterion_report):
    prob = ridge_problem(n_rows=40, n_params=2, n_workers=4, seed=0)
    counts = []
    for seed in range(200):
        cfg = SolverConfig(mode="ssadmm", delta=0.8, max_iter=200, early_stop=False, rng_seed=seed,
                           record_timing=False)
        trace = run(cfg, prob, LoopbackTransport()).trace
        assert len(trace) == 200
        counts.append([sum(r.worker_modes[i] == "e" for r in trace) for i in range(4)])
    mean = np.mean(counts, axis=0)
    expected = sum(0.8**k for k in range(200))
    ok = bool(np.all(np.abs(mean - expected) <= 0.5))
    criterion_report(6, ok, "per-worker mean exact solves " + ", ".join(f"{m:.3f}" for m in mean)
                            + f" (geometric mean {expected:.3f}, band +-0.5)")
    assert ok


def test_c7_fit_band(bench, criterion_report):
    best = {}
    for mode in ("admm", "sadmm", "ladmm"):
        fits = [bench.get(mode, seed).fit for seed in range(3)]
        best[mode] = min(fits, key=lambda f: f["mse"])
    a, s, lad = best["admm"], best["sadmm"], best["ladmm"]
    gap = abs(s["mse"] - a["mse"])
    ok = (a["mse"] <= 0.09 and s["mse"] <= 0.09 and a["r2"] >= 0.90 and s["r2"] >= 0.90 and gap <= 0.005)
    criterion_report(7, ok, f"best of 3 seeds: admm MSE {a['mse']:.4f} R2 {a['r2']:.4f}; sadmm MSE {s['mse']:.4f} "
                            f"R2 {s['r2']:.4f}; |gap| {gap:.2e}; ladmm MSE {lad['mse']:.4f} R2 {lad['r2']:.4f}")
    assert ok


def test_c8_transport_equivalence(tmp_path, criterion_report):
    env = dict(os.environ, PYTHONPATH=os.path.join(ROOT, "src"))
    paths = {}
    for kind in ("loopback", "tcp"):
        out = tmp_path / kind
        cmd = [sys.executable, "-m", "sadmm.cli", "run", REGRESSION, "--no-timing", "--max-iter", "60",
               "--transport", kind, "--out", str(out)]
        proc = subprocess.run(cmd, capture_output=True, text=True, env=env, timeout=600)
        assert proc.returncode == 0, proc.stderr
        paths[kind] = out / "metrics_sadmm.csv"
    a, b = paths["loopback"].read_bytes(), paths["tcp"].read_bytes()
    modes = {line.rsplit(",", 1)[-1] for line in a.decode().splitlines()[1:]}
    ok = a == b
    criterion_report(8, ok, f"loopback vs tcp (4 worker processes) metrics CSV "
                            f"{'bitwise identical' if ok else 'DIFFER'} ({len(a)} bytes, modes seen {sorted(modes)})")
    assert ok


def test_c9_oracle_suite(criterion_report):
    t0 = time.perf_counter()
    results = list(checks.gradcheck(seeds=100)) + list(checks.invariants())
    elapsed = time.perf_counter() - t0
    failed = [name for name, ok, _ in results if not ok]
    ok = not failed and elapsed < 120.0
    criterion_report(9, ok, f"{len(results) - len(failed)}/{len(results)} oracle checks passed in {elapsed:.1f}s"
                            + (f"; failed: {failed}" if failed else ""))
    assert ok
