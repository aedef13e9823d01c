"""Verification suites behind ``sadmm check``.

Each suite yields ``(name, passed, detail)`` tuples.
"""

import numpy as np

from .consensus import Problem, SolverConfig, dual_update, run, shrinkage, update_x0
from .models import ModelSpec, Shard, ShardObjective, grad, init_params, loss
from .theory import check_convergence_theory, quadratic_estimates
from .transport import LoopbackTransport

GRAD_RTOL = 1e-5


def fd_gradient(f, x, rel_step=1e-6):
    """Central differences with step ``rel_step (1 + |x_k|)`` per coordinate."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        h = rel_step * (1.0 + abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


GRADCHECK_MODELS = {
    "linear_features": ModelSpec("linear_features", 3, 2, basis="quadratic"),
    "mlp_regressor": ModelSpec("mlp_regressor", 4, 1, 5),
    "softmax_classifier": ModelSpec("softmax_classifier", 4, 4, 5),
}


def random_shard(spec, rng, rows=40):
    U = rng.normal(size=(rows, spec.input_dim))
    if spec.is_classifier:
        return Shard(U, rng.integers(0, spec.output_dim, rows), spec.output_dim)
    return Shard(U, rng.normal(size=(rows, spec.output_dim)))


def gradient_errors(spec, seed):
    rng = np.random.default_rng(seed)
    shard = random_shard(spec, rng)
    x = init_params(spec, rng, -1.0, 1.0)
    g = grad(spec, x, shard)
    g_fd = fd_gradient(lambda v: loss(spec, v, shard), x)
    return relative_error(g, g_fd)


def gradcheck(seeds=100):
    for kind, spec in GRADCHECK_MODELS.items():
        errs = [gradient_errors(spec, s) for s in range(seeds)]
        worst = max(errs)
        yield f"grad/{kind}", worst <= GRAD_RTOL, f"worst relative error {worst:.2e} over {seeds} seeds"


def ridge_problem(n_rows=2000, n_params=10, n_workers=4, seed=0, noise=0.3):
    """Least-squares consensus instance with an affine basis (``n_params - 1`` features)."""
    rng = np.random.default_rng(seed)
    m = n_params - 1
    U = rng.normal(size=(n_rows, m))
    w = rng.normal(size=n_params)
    y = w[0] + U @ w[1:] + noise * rng.normal(size=n_rows)
    spec = ModelSpec("linear_features", m, 1, basis="affine")
    parts = np.array_split(np.arange(n_rows), n_workers)
    return Problem(spec, [Shard(U[idx], y[idx]) for idx in parts])


def centralized_ridge(problem, cfg):
    """Minimizer of ``sum_i J_i(x) + h(x)`` for quadratic J_i and no or l2 regularization."""
    objs = [ShardObjective(problem.spec, s) for s in problem.shards]
    n = problem.n_params
    H = sum(o.hess(np.zeros(n)) for o in objs)
    c = -sum(o.grad(np.zeros(n)) for o in objs)
    if cfg.reg == "l2":
        H = H + 2.0 * cfg.omega * np.eye(n)
    return np.linalg.solve(H, c)


def invariants(seeds=100):
    cases = [
        ("shrinkage(1.2, 0.5)", shrinkage(1.2, 0.5), 0.7),
        ("shrinkage(0.3, 0.5)", shrinkage(0.3, 0.5), 0.0),
        ("shrinkage(-2.0, 0.5)", shrinkage(-2.0, 0.5), -1.5),
    ]
    for name, got, want in cases:
        yield name, abs(got - want) <= 1e-15, f"{got!r}"
    cfg = SolverConfig(n_workers=2, rho=1.0)
    got = update_x0([[1.0], [3.0]], [[0.0], [0.0]], cfg)
    yield "update_x0 mean", np.array_equal(got, [2.0]), f"{got}"
    cfg = SolverConfig(n_workers=1, rho=1.0, reg="l1", omega=0.5)
    got = update_x0([[0.3]], [[0.0]], cfg)
    yield "update_x0 l1 dead zone", np.array_equal(got, [0.0]), f"{got}"
    cfg = SolverConfig(n_workers=2, rho=1.0, reg="l2", omega=1.0)
    got = update_x0([[3.0], [5.0]], [[0.0], [0.0]], cfg)
    yield "update_x0 l2", np.allclose(got, [2.0], rtol=0, atol=1e-15), f"{got}"
    got = dual_update(np.array([0.0]), np.array([1.0]), np.array([0.0]), 2.0)
    yield "dual_update", np.array_equal(got, [2.0]), f"{got}"

    # N = 1, no regularization: the fixed point is the centralized minimizer
    prob = ridge_problem(n_rows=300, n_params=5, n_workers=1, seed=3)
    cfg = SolverConfig(n_workers=1, rho=1.0, mode="admm", max_iter=2000, stop_tol_primal=1e-12, stop_tol_dual=1e-12)
    res = run(cfg, prob, LoopbackTransport())
    x_star = centralized_ridge(prob, cfg)
    obj = ShardObjective(prob.spec, prob.shards[0])
    err = float(np.linalg.norm(res.state.x0 - x_star))
    gnorm = float(np.linalg.norm(obj.grad(res.state.x0)))
    yield "N=1 fixed point", err <= 1e-8 and gnorm <= 1e-8, f"|x0 - x*| = {err:.2e}, |grad J(x0)| = {gnorm:.2e}"

    # dual identity and quadratic exactness on the ridge instance
    prob = ridge_problem()
    traces = {}
    for mode in ("admm", "sadmm"):
        cfg = SolverConfig(rho=1.0, mode=mode, max_iter=100, early_stop=False, record_timing=False)
        traces[mode] = run(cfg, prob, LoopbackTransport()).trace
    worst = 0.0
    prev = None
    for rec in traces["admm"]:
        if prev is not None:
            lhs = np.linalg.norm(rec.lams - prev.lams, axis=1)
            rhs = cfg.rho * np.linalg.norm(rec.xs - rec.x0, axis=1)
            worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, rhs))))
        prev = rec
    yield "dual-update identity", worst <= 1e-12, f"worst relative mismatch {worst:.2e}"
    diff = max(
        max(np.max(np.abs(a.xs - b.xs)), np.max(np.abs(a.x0 - b.x0)), np.max(np.abs(a.lams - b.lams)))
        for a, b in zip(traces["admm"], traces["sadmm"])
    )
    yield "quadratic exactness", diff <= 1e-8, f"max |admm - sadmm| = {diff:.2e} over 100 iterations"


def theory(seeds=100):
    prob = ridge_problem()
    objs = [ShardObjective(prob.spec, s) for s in prob.shards]
    base = SolverConfig(rho=1.0)
    est = quadratic_estimates(objs, base)
    rho = assumption_rho(est)
    for reg, omega in (("none", 0.0), ("l1", 0.01), ("l2", 0.5)):
        cfg = SolverConfig(rho=rho, reg=reg, omega=omega, mode="sadmm", max_iter=200, early_stop=False)
        est = quadratic_estimates(objs, cfg)
        rep = check_convergence_theory(run(cfg, prob, LoopbackTransport()).trace, est, cfg, objs)
        yield f"theory/{reg} rho={rho:g}", rep.ok, rep.summary()


def assumption_rho(est, margin=1.01):
    """Smallest round number rho with ``rho (lambda_min + rho) >= 8 L^2`` for every worker."""
    lmin = est.gamma_i - est.rho
    need = (-lmin + np.sqrt(lmin**2 + 32.0 * est.L**2)) / 2.0
    return float(np.ceil(need.max() * margin))
