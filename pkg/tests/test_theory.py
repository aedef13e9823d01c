import numpy as np
import pytest

from sadmm.checks import assumption_rho, ridge_problem
from sadmm.consensus import SolverConfig, run
from sadmm.models import ShardObjective
from sadmm.theory import TheoryError, check_convergence_theory, empirical_estimates, quadratic_estimates
from sadmm.transport import LoopbackTransport


@pytest.fixture(scope="module")
def instance():
    prob = ridge_problem(n_rows=400, n_params=5, seed=2)
    objs = [ShardObjective(prob.spec, s) for s in prob.shards]
    return prob, objs


def test_quadratic_constants_match_eigenvalues(instance):
    prob, objs = instance
    cfg = SolverConfig(rho=2.0, reg="l2", omega=0.5)
    est = quadratic_estimates(objs, cfg)
    H0 = objs[0].hess(np.zeros(5))
    eig = np.linalg.eigvalsh(H0)
    assert est.L[0] == pytest.approx(eig[-1], rel=1e-12)
    assert est.gamma_i[0] == pytest.approx(eig[0] + 2.0, rel=1e-12)
    assert est.gamma_x0 == 4 * 2.0 + 1.0
    # J_m is the centralized optimum: no iterate of any run goes below it
    H = sum(o.hess(np.zeros(5)) for o in objs) + np.eye(5)
    x = np.linalg.solve(H, -sum(o.grad(np.zeros(5)) for o in objs))
    assert est.J_m == pytest.approx(sum(o.value(x) for o in objs) + 0.5 * x @ x, rel=1e-10)


def test_assumption_rho_is_smallest_integer_satisfying(instance):
    _, objs = instance
    est = quadratic_estimates(objs, SolverConfig(rho=1.0))
    rho = assumption_rho(est, margin=1.0)
    ok = quadratic_estimates(objs, SolverConfig(rho=rho))
    assert np.all(ok.assumption_margin() >= 0)
    below = quadratic_estimates(objs, SolverConfig(rho=rho - 1))
    assert np.any(below.assumption_margin() < 0)


def test_admm_trace_has_no_violations(instance):
    prob, objs = instance
    est0 = quadratic_estimates(objs, SolverConfig())
    cfg = SolverConfig(rho=assumption_rho(est0), mode="admm", max_iter=80, early_stop=False)
    rep = check_convergence_theory(run(cfg, prob, LoopbackTransport()).trace, quadratic_estimates(objs, cfg), cfg, objs)
    assert rep.D == cfg.newton_tol
    assert rep.ok, rep.summary()


@pytest.mark.parametrize("reg, omega", [("none", 0.0), ("l1", 0.01), ("l2", 0.5)])
def test_sadmm_trace_has_no_violations(instance, reg, omega):
    prob, objs = instance
    est0 = quadratic_estimates(objs, SolverConfig())
    cfg = SolverConfig(rho=assumption_rho(est0), reg=reg, omega=omega, max_iter=120, early_stop=False)
    rep = check_convergence_theory(run(cfg, prob, LoopbackTransport()).trace, quadratic_estimates(objs, cfg), cfg, objs)
    assert rep.ok, rep.summary()
    assert rep.checked["c"] > 0


def test_tiny_rho_flags_assumption(instance):
    prob, objs = instance
    cfg = SolverConfig(rho=0.05, max_iter=20, early_stop=False)
    rep = check_convergence_theory(run(cfg, prob, LoopbackTransport()).trace, quadratic_estimates(objs, cfg), cfg, objs)
    assert not rep.assumption_holds and not rep.ok
    assert "violated" in rep.summary()


def test_refusals(instance):
    prob, objs = instance
    cfg = SolverConfig(max_iter=2, early_stop=False)
    trace = run(cfg, prob, LoopbackTransport()).trace
    with pytest.raises(TheoryError):
        check_convergence_theory(trace, quadratic_estimates(objs, cfg), cfg)
    emp = empirical_estimates(objs, cfg, np.zeros(5), np.random.default_rng(0))
    assert not emp.exact
    with pytest.raises(TheoryError):
        check_convergence_theory(trace * 3, emp, cfg)
