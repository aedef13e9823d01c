"""Worker-side augmented-Lagrangian subproblem.

Each worker minimizes

    L_i(x; x0, lam) = J_i(x) + lam^T (x - x0) + rho/2 ||x - x0||^2

over its local copy ``x``. The parameters ``p = (x0, lam)`` move every
ADMM iteration. This module solves the subproblem exactly (damped Newton)
or approximately: a tangential predictor that follows the solution
manifold to first order in ``p``, then Newton corrector steps until the
stationarity residual drops below a tolerance.

Objectives are any object exposing ``value(x)``, ``grad(x)``, ``hess(x)``
and ``dim`` (see :mod:`sadmm.models`).
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import solve_sym

EXACT = "exact_nlp"
PREDICTOR = "predictor"
CORRECTED = "predictor_corrected"

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100
ARMIJO_C = 1e-4
BACKTRACK = 0.5
MIN_STEP = 1e-12
# function values closer than this (relative) are equal up to roundoff
ARMIJO_SLACK = 1e-14
MAX_CORRECTORS = 20


class SubproblemError(RuntimeError):
    """Base class for subproblem solve failures."""


class NonconvergenceError(SubproblemError):
    """Newton hit its iteration cap or stalled; carries the best iterate."""

    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report
        self.best_x = report.x_out


class ToleranceUnreachable(SubproblemError):
    """The corrector loop ran out of steps above the requested residual."""

    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class ParamBlock:
    """Subproblem parameters: consensus point ``x0`` and multiplier ``lam``."""

    x0: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        lam = np.array(self.lam, dtype=float).reshape(-1)
        if x0.shape != lam.shape:
            raise ValueError(f"x0 has {x0.size} entries, lambda has {lam.size}")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(lam))):
            raise ValueError("non-finite parameter block")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "lam", lam)

    def stacked(self):
        return np.concatenate([self.x0, self.lam])


@dataclass
class SolveReport:
    x_out: np.ndarray
    mode: str
    eps_norm: float
    newton_iters: int = 0
    corrector_iters: int = 0
    linear_solves: int = 0
    wall_time: float = 0.0
    shifts: list = field(default_factory=list)


@dataclass
class WorkerState:
    """What a worker keeps between iterations: its iterate and the parameters it solved for."""

    objective: object
    x_tilde: np.ndarray
    last_params: ParamBlock = None


def aug_value(objective, x, p, rho):
    """``J(x) + lam^T (x - x0) + rho/2 ||x - x0||^2``."""
    d = x - p.x0
    val = objective.value(x) + p.lam @ d + 0.5 * rho * (d @ d)
    if not np.isfinite(val):
        raise SubproblemError("non-finite augmented Lagrangian value")
    return float(val)


def aug_grad(objective, x, p, rho):
    """``grad J(x) + lam + rho (x - x0)``, the stationarity residual."""
    g = objective.grad(x) + p.lam + rho * (x - p.x0)
    if not np.all(np.isfinite(g)):
        raise SubproblemError("non-finite augmented Lagrangian gradient")
    return g


def aug_hess(objective, x, rho):
    """Hessian of the subproblem in ``x``; it does not depend on the parameters."""
    H = objective.hess(x)
    return H + rho * np.eye(H.shape[0])


def solve_exact(state, p, rho, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Minimize the subproblem by damped Newton, warm-started at ``state.x_tilde``.

    Directions come from ``solve_sym(hess + rho I, -grad)`` (diagonal shift
    if indefinite); step lengths from Armijo backtracking on the
    augmented Lagrangian. Does not modify `state`. The sufficient-decrease
    test allows ``1e-14 (1 + |f|)`` of roundoff; without it a full Newton
    step next to the solution is rejected for raising ``f`` by one ulp.

    Raises
    ------
    NonconvergenceError
        After `max_iter` iterations, or if the line search cannot make
        progress, with the best iterate found.
    """
    t0 = time.perf_counter()
    obj = state.objective
    x = np.array(state.x_tilde, dtype=float)
    f = aug_value(obj, x, p, rho)
    g = aug_grad(obj, x, p, rho)
    gnorm = float(np.linalg.norm(g))
    report = SolveReport(x, EXACT, gnorm)
    for it in range(max_iter):
        if gnorm <= tol:
            break
        d, shift = solve_sym(aug_hess(obj, x, rho), -g, return_shift=True)
        report.linear_solves += 1
        if shift:
            report.shifts.append(shift)
        slope = float(g @ d)
        slack = ARMIJO_SLACK * (1.0 + abs(f))
        step = 1.0
        while True:
            x_new = x + step * d
            f_new = aug_value(obj, x_new, p, rho)
            if f_new <= f + ARMIJO_C * step * slope + slack:
                break
            step *= BACKTRACK
            if step < MIN_STEP:
                report.x_out, report.eps_norm = x, gnorm
                report.newton_iters = it
                report.wall_time = time.perf_counter() - t0
                raise NonconvergenceError(
                    f"line search stalled at ||grad|| = {gnorm:.3e}", report
                )
        x, f = x_new, f_new
        g = aug_grad(obj, x, p, rho)
        gnorm = float(np.linalg.norm(g))
        report.newton_iters = it + 1
    report.x_out, report.eps_norm = x, gnorm
    report.wall_time = time.perf_counter() - t0
    if gnorm > tol:
        raise NonconvergenceError(
            f"no convergence in {max_iter} Newton iterations (||grad|| = {gnorm:.3e})", report
        )
    return report


def tangential_predict(state, p_new, rho):
    """First-order estimate of the subproblem solution at `p_new`.

    ``x_prev - M^{-1} (-rho * dx0 + dlam)`` with ``M`` the subproblem
    Hessian at ``(x_prev, p_old)``; the mixed derivative of the stationarity
    residual is ``[-rho I | I]`` in closed form. One linear solve.
    """
    if state.last_params is None:
        raise SubproblemError("predictor needs a previous solution")
    p_old = state.last_params
    x_prev = np.asarray(state.x_tilde, dtype=float)
    rhs = -rho * (p_new.x0 - p_old.x0) + (p_new.lam - p_old.lam)
    return x_prev - solve_sym(aug_hess(state.objective, x_prev, rho), rhs)


def corrector_step(objective, x, p, rho, g=None):
    """One Newton step on the stationarity residual at ``(x, p)``; one linear solve."""
    if g is None:
        g = aug_grad(objective, x, p, rho)
    return x - solve_sym(aug_hess(objective, x, rho), g)


def approximate_solve(state, p_new, rho, D, max_correctors=MAX_CORRECTORS):
    """Predictor, then correctors until ``||aug_grad|| <= D``.

    Raises
    ------
    ToleranceUnreachable
        `max_correctors` steps were taken and the residual is still above
        `D`; the report is attached so the caller can fall back.
    """
    if D <= 0:
        raise ValueError("D must be positive")
    t0 = time.perf_counter()
    obj = state.objective
    x = tangential_predict(state, p_new, rho)
    g = aug_grad(obj, x, p_new, rho)
    eps = float(np.linalg.norm(g))
    report = SolveReport(x, PREDICTOR, eps, linear_solves=1)
    while eps > D and report.corrector_iters < max_correctors:
        x = corrector_step(obj, x, p_new, rho, g)
        g = aug_grad(obj, x, p_new, rho)
        eps = float(np.linalg.norm(g))
        report.corrector_iters += 1
        report.linear_solves += 1
        if not np.isfinite(eps):
            break
    report.x_out, report.eps_norm = x, eps
    if report.corrector_iters:
        report.mode = CORRECTED
    report.wall_time = time.perf_counter() - t0
    if not eps <= D:
        raise ToleranceUnreachable(
            f"residual {eps:.3e} above D = {D:.3e} after {report.corrector_iters} correctors",
            report,
        )
    return report


def accept(state, report, p):
    """Return a new state positioned at ``report.x_out`` for parameters `p`."""
    return replace(state, x_tilde=np.array(report.x_out, dtype=float), last_params=p)


def ladmm_step(grad_k, x_k, p, rho, mu):
    """Linearized-ADMM update around ``x_k``.

    Minimizer of ``grad_k^T x + lam^T (x - x0) + rho/2 ||x - x0||^2
    + mu/2 ||x - x_k||^2``, which is available componentwise in closed form.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    return (rho * p.x0 + mu * np.asarray(x_k, dtype=float) - grad_k - p.lam) / (rho + mu)
