"""Worker node: owns one shard and answers round requests from the master."""

import time

import numpy as np

from . import messages as msg
from .linalg import LinalgError
from .models import ModelSpec, Shard, ShardObjective
from .subproblem import (
    CORRECTED,
    EXACT,
    PREDICTOR,
    ParamBlock,
    SubproblemError,
    WorkerState,
    accept,
    approximate_solve,
    aug_grad,
    ladmm_step,
    solve_exact,
)

_MODE_CODES = {EXACT: msg.SOLVED_EXACT, PREDICTOR: msg.SOLVED_PREDICTOR, CORRECTED: msg.SOLVED_CORRECTED}


class WorkerNode:
    """Single-threaded request handler: receive, solve, reply.

    The node is built from an :class:`~sadmm.messages.AssignShard` message so
    that in-process and socket-connected workers run the same code.
    """

    def __init__(self, assign):
        self.worker_id = assign.worker_id
        cfg = assign.config
        self.spec = ModelSpec.from_dict(cfg["model"])
        self.shard = Shard(assign.features, assign.labels, assign.n_classes)
        self.objective = ShardObjective(self.spec, self.shard)
        self.rho = float(cfg["rho"])
        self.D = float(cfg["D"])
        self.newton_tol = float(cfg["newton_tol"])
        self.max_correctors = int(cfg["max_correctors"])
        self.mu = float(cfg["mu"])
        self.stale_exact = bool(cfg.get("exact_solve_uses_stale_params", False))
        self.state = WorkerState(self.objective, np.array(assign.x_init, dtype=float))
        self.round = None

    def handle(self, m):
        """Process one message and return the reply (``None`` for Shutdown)."""
        if isinstance(m, msg.RoundParams):
            try:
                return self.solve_round(m)
            except (SubproblemError, LinalgError) as exc:
                return msg.WorkerError(self.worker_id, m.k, f"{type(exc).__name__}: {exc}")
        if isinstance(m, msg.Shutdown):
            return None
        raise msg.ProtocolError(f"worker {self.worker_id} cannot handle {type(m).__name__}")

    def solve_round(self, m):
        p = ParamBlock(m.x0, m.lam)
        fallback = False
        t0 = time.perf_counter()
        if m.directive == msg.DIRECTIVE_EXACT:
            rep, p_used = self._exact(p)
        elif m.directive == msg.DIRECTIVE_SENSITIVITY:
            try:
                rep = approximate_solve(self.state, p, self.rho, self.D, self.max_correctors)
                p_used = p
            except (SubproblemError, LinalgError):
                fallback = True
                rep, p_used = self._exact(p)
        elif m.directive == msg.DIRECTIVE_LADMM:
            x_prev = self.state.x_tilde
            x_new = ladmm_step(self.objective.grad(x_prev), x_prev, p, self.rho, self.mu)
            eps = float(np.linalg.norm(aug_grad(self.objective, x_new, p, self.rho)))
            self.state = self.state.__class__(self.objective, x_new, p)
            wall = time.perf_counter() - t0
            return self._result(m.k, x_new, eps, msg.SOLVED_LADMM, False, 0, 0, 0, wall)
        else:
            raise msg.ProtocolError(f"unknown directive {m.directive}")
        eps = rep.eps_norm
        if p_used is not p:
            eps = float(np.linalg.norm(aug_grad(self.objective, rep.x_out, p, self.rho)))
        self.state = accept(self.state, rep, p_used)
        wall = time.perf_counter() - t0
        return self._result(
            m.k, rep.x_out, eps, _MODE_CODES[rep.mode], fallback,
            rep.newton_iters, rep.corrector_iters, rep.linear_solves, wall,
        )

    def _exact(self, p):
        p_used = p
        if self.stale_exact and self.state.last_params is not None:
            p_used = self.state.last_params
        return solve_exact(self.state, p_used, self.rho, self.newton_tol), p_used

    def _result(self, k, x, eps, mode, fallback, newton, correctors, solves, wall):
        stats = msg.RoundStats(
            mode=mode,
            fallback=fallback,
            newton_iters=newton,
            corrector_iters=correctors,
            linear_solves=solves,
            loss=self.objective.value(x),
            wall_time=wall,
        )
        return msg.RoundResult(k, self.worker_id, np.array(x, dtype=float), float(eps), stats)
