"""Empirical checks of the convergence bounds for inexact consensus ADMM.

For a quadratic local loss ``J_i(x) = 1/2 x^T H_i x - c_i^T x + const`` the
constants in the bounds are exact eigenvalue quantities:

    L_i        = lambda_max(H_i)               Lipschitz constant of grad J_i
    gamma_i    = lambda_min(H_i) + rho         strong convexity of L_i in x_i
    rho_m      = min(rho, min_i gamma_i)
    gamma      = N rho (+ 2 omega for l2)      strong convexity in x0

With ``eps`` bounded by D, four properties are checked along a trace:

(a) ``||lam^{k+1} - lam^k||^2 <= 2 L_i^2 ||dx_i||^2 + 8 D^2`` per worker
(b) ``L^{k+1} - L^k <= sum_i (2 L_i^2/rho - gamma_i/4) ||dx_i||^2
    - gamma/2 ||dx0||^2 + 8 N D^2 / rho_m``
(c) ``L^k >= J_m - D R`` once every worker uses the sensitivity update
(d) at the last iterate ``||grad J_i(x_i) + lam_i|| <= D`` and
    ``||x_i - x0|| <= (2 L_i^2 Dt + 8 D^2) / rho`` with ``Dt`` the largest
    late-iterate step norm.

Bound (b) is checked with the squared x0 step; the unsquared variant is
counted separately for information (it cannot hold for small steps).
The first transition is skipped because the zero initial multipliers are
not tied to any local solution.
"""

from dataclasses import dataclass, field

import numpy as np

from .models import QuadraticObjective

ROUNDOFF = 1e-10
LATE_FRACTION = 0.1


class TheoryError(ValueError):
    """The trace or problem does not allow certified constants."""


@dataclass
class AnalysisEstimates:
    """Constants entering the convergence bounds.

    ``exact`` is True when they are eigenvalue quantities of quadratic
    losses; otherwise they are sampled estimates (flagged as empirical)
    and :func:`check_convergence_theory` will not use them.
    """

    L: np.ndarray
    gamma_i: np.ndarray
    rho: float
    J_m: float
    gamma_x0: float
    exact: bool = True
    notes: list = field(default_factory=list)

    @property
    def rho_m(self):
        return float(min(self.rho, self.gamma_i.min()))

    def assumption_margin(self):
        """``rho gamma_i - 8 L_i^2`` per worker; the bounds assume this is >= 0."""
        return self.rho * self.gamma_i - 8.0 * self.L**2


def _quadratic_parts(obj):
    if isinstance(obj, QuadraticObjective):
        return obj.H, obj.c
    if getattr(obj, "is_quadratic", False):
        n = obj.dim
        return obj.hess(np.zeros(n)), -obj.grad(np.zeros(n))
    raise TheoryError("constants are only certified for quadratic losses")


def quadratic_estimates(objectives, cfg):
    """Exact constants for quadratic local losses.

    ``J_m`` is the minimum of ``sum_i J_i(x) + h(x)`` for no or l2
    regularization, and of ``sum_i J_i`` for l1 (a valid lower bound).
    """
    parts = [_quadratic_parts(o) for o in objectives]
    eig = [np.linalg.eigvalsh(H) for H, _ in parts]
    L = np.array([max(abs(e[0]), abs(e[-1])) for e in eig])
    gamma_i = np.array([e[0] for e in eig]) + cfg.rho
    N = len(objectives)
    H = sum(H for H, _ in parts)
    c = sum(c for _, c in parts)
    notes = []
    if cfg.reg == "l2":
        H = H + 2.0 * cfg.omega * np.eye(H.shape[0])
    elif cfg.reg == "l1":
        notes.append("J_m ignores the l1 term (lower bound)")
    x = np.linalg.lstsq(H, c, rcond=None)[0]
    total = sum(o.value(x) for o in objectives)
    if cfg.reg == "l2":
        total += cfg.omega * float(x @ x)
    gamma = N * cfg.rho + (2.0 * cfg.omega if cfg.reg == "l2" else 0.0)
    return AnalysisEstimates(L, gamma_i, cfg.rho, float(total), gamma, True, notes)


def empirical_estimates(objectives, cfg, x, rng, samples=20, radius=0.5):
    """Sampled constants for nonquadratic losses, flagged ``exact=False``.

    ``L_i`` is the largest gradient-difference ratio over random pairs near
    `x`; ``gamma_i`` the smallest Hessian eigenvalue of the subproblem at `x`.
    """
    x = np.asarray(x, dtype=float)
    L, gam = [], []
    for obj in objectives:
        best = 0.0
        for _ in range(samples):
            a = x + rng.uniform(-radius, radius, x.size)
            b = x + rng.uniform(-radius, radius, x.size)
            d = np.linalg.norm(a - b)
            if d > 0:
                best = max(best, np.linalg.norm(obj.grad(a) - obj.grad(b)) / d)
        L.append(best)
        gam.append(np.linalg.eigvalsh(obj.hess(x))[0] + cfg.rho)
    N = len(objectives)
    J_m = float(sum(o.value(x) for o in objectives))
    gamma = N * cfg.rho + (2.0 * cfg.omega if cfg.reg == "l2" else 0.0)
    return AnalysisEstimates(np.array(L), np.array(gam), cfg.rho, J_m, gamma, False,
                             ["sampled estimates, not certified; J_m is a value, not a bound"])


@dataclass
class TheoryReport:
    assumption_holds: bool
    D: float
    violations: dict
    checked: dict
    unsquared_b_violations: int
    d_tilde: float
    details: list = field(default_factory=list)

    @property
    def total_violations(self):
        return sum(self.violations.values())

    @property
    def ok(self):
        return self.assumption_holds and self.total_violations == 0

    def summary(self):
        if not self.assumption_holds:
            return "assumption rho*gamma_i >= 8 L_i^2 violated; bounds not asserted"
        parts = [f"({c}) {self.violations[c]}/{self.checked[c]}" for c in "abcd"]
        return "violations " + ", ".join(parts)


def check_convergence_theory(trace, estimates, cfg, objectives=None, D=None):
    """Evaluate bounds (a) to (d) on a trace; see the module docstring.

    Parameters
    ----------
    trace : list of IterationRecord
        Must carry the x0/x_i/lambda_i snapshots.
    estimates : AnalysisEstimates
        Must be exact (quadratic problem).
    objectives : list, optional
        Local losses, used for the stationarity part of (d); without them
        the worker-reported residuals of the last record are used.
    D : float, optional
        Residual bound; defaults to ``cfg.D`` for sensitivity modes and
        ``cfg.newton_tol`` for plain ADMM.
    """
    if not estimates.exact:
        raise TheoryError("refusing to certify bounds with empirical constants")
    if len(trace) < 3:
        raise TheoryError("need at least three iterations")
    if D is None:
        D = cfg.newton_tol if cfg.mode == "admm" else cfg.D
    est = estimates
    rho = cfg.rho
    N = len(est.L)
    holds = bool(np.all(est.assumption_margin() >= 0))
    viol = dict.fromkeys("abcd", 0)
    checked = dict.fromkeys("abcd", 0)
    unsq = 0
    details = []

    for prev, cur in zip(trace[1:-1], trace[2:]):
        dx = np.linalg.norm(cur.xs - prev.xs, axis=1)
        dlam = np.linalg.norm(cur.lams - prev.lams, axis=1)
        dx0 = float(np.linalg.norm(cur.x0 - prev.x0))
        rhs_a = 2.0 * est.L**2 * dx**2 + 8.0 * D**2
        tol_a = ROUNDOFF * np.maximum(1.0, rhs_a)
        bad = dlam**2 > rhs_a + tol_a
        viol["a"] += int(bad.sum())
        checked["a"] += N
        if bad.any():
            details.append(("a", cur.k, np.flatnonzero(bad).tolist()))

        dL = cur.aug_lagrangian - prev.aug_lagrangian
        common = float(np.sum((2.0 * est.L**2 / rho - est.gamma_i / 4.0) * dx**2)) + 8.0 * N * D**2 / est.rho_m
        tol_b = ROUNDOFF * max(1.0, abs(cur.aug_lagrangian), abs(prev.aug_lagrangian))
        checked["b"] += 1
        if dL > common - 0.5 * est.gamma_x0 * dx0**2 + tol_b:
            viol["b"] += 1
            details.append(("b", cur.k, dL))
        if dL > common - 0.5 * est.gamma_x0 * dx0 + tol_b:
            unsq += 1

    started = False
    for rec in trace[1:]:
        started = started or all(m in "pc" for m in rec.worker_modes)
        if started:
            checked["c"] += 1
            tol_c = ROUNDOFF * max(1.0, abs(rec.aug_lagrangian))
            if rec.aug_lagrangian < est.J_m - D * cfg.R - tol_c:
                viol["c"] += 1
                details.append(("c", rec.k, rec.aug_lagrangian))

    last = trace[-1]
    n_late = max(1, int(round(LATE_FRACTION * len(trace))))
    late = trace[-n_late - 1:]
    d_tilde = max(float(np.max(np.linalg.norm(b.xs - a.xs, axis=1))) for a, b in zip(late[:-1], late[1:]))
    if objectives is not None:
        stat = np.array([np.linalg.norm(o.grad(x) + lam) for o, x, lam in zip(objectives, last.xs, last.lams)])
    else:
        stat = np.asarray(last.worker_eps)
    gap = np.linalg.norm(last.xs - last.x0, axis=1)
    bound = (2.0 * est.L**2 * d_tilde + 8.0 * D**2) / rho
    tol_d = ROUNDOFF * np.maximum(1.0, bound)
    bad_d = (stat > D + ROUNDOFF) | (gap > bound + tol_d)
    viol["d"] = int(bad_d.sum())
    checked["d"] = N
    if bad_d.any():
        details.append(("d", last.k, np.flatnonzero(bad_d).tolist()))
    return TheoryReport(holds, D, viol, checked, unsq, d_tilde, details)
