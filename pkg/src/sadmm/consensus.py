"""Master side of consensus ADMM with sensitivity-based subproblems.

One iteration ``k`` (states are indexed so that ``x^k`` means "before"):

    x0^{k+1}   = prox of the regularizer at mean(x_i^k + lam_i^k / rho)
    x_i^{k+1}  = subproblem solution for p_i = (x0^{k+1}, lam_i^k)
    lam^{k+1}  = lam_i^k + rho (x_i^{k+1} - x0^{k+1})

Workers are reached only through a transport (see :mod:`sadmm.transport`);
the master decides per worker whether the subproblem is solved exactly,
by the sensitivity update, or by a linearized step.
"""

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import messages as msg
from .models import ModelSpec
from .subproblem import (
    MAX_CORRECTORS,
    NEWTON_TOL,
    ParamBlock,
    WorkerState,
    accept,
    approximate_solve,
    ladmm_step,
    solve_exact,
)
from .subproblem import SubproblemError
from .linalg import LinalgError

MODES = ("admm", "sadmm", "ssadmm", "ladmm")
REGS = ("none", "l1", "l2")

EXACT = "exact"
SENSITIVITY = "sensitivity"
LINEARIZED = "linearized"

_DIRECTIVES = {EXACT: msg.DIRECTIVE_EXACT, SENSITIVITY: msg.DIRECTIVE_SENSITIVITY, LINEARIZED: msg.DIRECTIVE_LADMM}

__all__ = [
    "SolverConfig", "GlobalState", "IterationRecord", "Problem", "RunResult",
    "shrinkage", "update_x0", "dual_update", "residuals", "choose_solve_mode",
    "ladmm_step", "step", "run", "sharing_step", "run_sharing", "aug_lagrangian",
    "worker_streams", "initial_point",
]


class ConfigError(ValueError):
    """Invalid solver configuration."""


@dataclass
class SolverConfig:
    """All knobs of a consensus run.

    ``stop_tol_primal``/``stop_tol_dual`` of None mean ``1e-6 sqrt(N n)``
    and ``1e-6 sqrt(n)``; ``early_stop=False`` runs exactly ``max_iter``
    iterations. ``record_timing=False`` writes zero wall times so traces
    can be compared bit for bit across runs and carriers.
    """

    n_workers: int = 4
    rho: float = 1.0
    reg: str = "none"
    omega: float = 0.0
    R: float = 0.2
    D: float = 0.01
    newton_tol: float = NEWTON_TOL
    max_iter: int = 200
    mode: str = "sadmm"
    delta: float = 0.8
    mu: float = 1.0
    rng_seed: int = 0
    stop_tol_primal: float = None
    stop_tol_dual: float = None
    early_stop: bool = True
    max_correctors: int = MAX_CORRECTORS
    exact_solve_uses_stale_params: bool = False
    record_timing: bool = True

    def __post_init__(self):
        def bad(text):
            raise ConfigError(text)

        if not (isinstance(self.n_workers, (int, np.integer)) and self.n_workers >= 1):
            bad(f"n_workers must be a positive integer, got {self.n_workers!r}")
        for name in ("rho", "R", "D", "mu", "newton_tol"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                bad(f"{name} must be positive and finite, got {v!r}")
        if self.reg not in REGS:
            bad(f"reg must be one of {REGS}, got {self.reg!r}")
        if not (math.isfinite(self.omega) and self.omega >= 0):
            bad(f"omega must be >= 0, got {self.omega!r}")
        if self.mode not in MODES:
            bad(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "ssadmm" and not 0 < self.delta < 1:
            bad(f"delta must lie strictly inside (0, 1), got {self.delta!r}")
        if not (isinstance(self.max_iter, (int, np.integer)) and self.max_iter >= 0):
            bad(f"max_iter must be a non-negative integer, got {self.max_iter!r}")
        if not (isinstance(self.max_correctors, (int, np.integer)) and self.max_correctors >= 0):
            bad(f"max_correctors must be a non-negative integer, got {self.max_correctors!r}")
        for name in ("stop_tol_primal", "stop_tol_dual"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                bad(f"{name} must be >= 0, got {v!r}")

    def tolerances(self, n):
        p = self.stop_tol_primal
        d = self.stop_tol_dual
        if p is None:
            p = 1e-6 * math.sqrt(self.n_workers * n)
        if d is None:
            d = 1e-6 * math.sqrt(n)
        return p, d

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**d)

    def worker_config(self, spec):
        """The part of the configuration a worker needs, as plain JSON data."""
        return {
            "model": spec.to_dict(),
            "rho": self.rho,
            "D": self.D,
            "newton_tol": self.newton_tol,
            "max_correctors": self.max_correctors,
            "mu": self.mu,
            "exact_solve_uses_stale_params": self.exact_solve_uses_stale_params,
        }


@dataclass
class Problem:
    """A model family and one data shard per worker."""

    spec: ModelSpec
    shards: list

    @property
    def n_params(self):
        return self.spec.n_params

    def assignments(self, cfg, x_init):
        if len(self.shards) != cfg.n_workers:
            raise ConfigError(f"{len(self.shards)} shards for {cfg.n_workers} workers")
        wc = cfg.worker_config(self.spec)
        return [
            msg.AssignShard(i, wc, np.asarray(s.features), np.asarray(s.labels), s.n_classes,
                            np.asarray(x_init, dtype=float))
            for i, s in enumerate(self.shards)
        ]


@dataclass
class GlobalState:
    x0: np.ndarray
    xs: np.ndarray
    lams: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.x0 = np.array(self.x0, dtype=float)
        self.xs = np.array(self.xs, dtype=float)
        self.lams = np.array(self.lams, dtype=float)
        n = self.x0.shape[0]
        if self.xs.ndim != 2 or self.xs.shape[1] != n or self.lams.shape != self.xs.shape:
            raise ValueError("x0, x_i and lambda_i must share one dimension")
        if self.k < 0:
            raise ValueError("k must be >= 0")


@dataclass
class IterationRecord:
    """Diagnostics of one iteration plus snapshots of the new iterates."""

    k: int
    r_norm: float
    s_norm: float
    aug_lagrangian: float
    eps_max: float
    nlp_solves: int
    linear_solves: int
    max_worker_wall_time: float
    worker_modes: str
    worker_eps: np.ndarray = field(repr=False)
    worker_times: np.ndarray = field(repr=False)
    fallbacks: np.ndarray = field(repr=False)
    losses: np.ndarray = field(repr=False)
    x0: np.ndarray = field(repr=False)
    xs: np.ndarray = field(repr=False)
    lams: np.ndarray = field(repr=False)

    @property
    def any_fallback(self):
        return bool(np.any(self.fallbacks))


@dataclass
class RunResult:
    trace: list
    status: str
    state: GlobalState
    x_init: np.ndarray

    @property
    def converged(self):
        return self.status == "converged"


def shrinkage(a, kappa):
    """Soft threshold ``max(0, a - kappa) - max(0, -a - kappa)``, elementwise."""
    if np.any(np.asarray(kappa) < 0):
        raise ValueError("kappa must be >= 0")
    a = np.asarray(a, dtype=float)
    out = np.maximum(0.0, a - kappa) - np.maximum(0.0, -a - kappa)
    return float(out) if out.ndim == 0 else out


def update_x0(xs, lams, cfg):
    """Closed-form consensus update for the configured regularizer."""
    xs = np.asarray(xs, dtype=float)
    lams = np.asarray(lams, dtype=float)
    if xs.shape != lams.shape or xs.ndim != 2:
        raise ValueError(f"x_i stack {xs.shape} and lambda stack {lams.shape} disagree")
    N = xs.shape[0]
    v = xs + lams / cfg.rho
    # sum in worker order so the result never depends on arrival order
    total = v[0].copy()
    for row in v[1:]:
        total += row
    if cfg.reg == "l2":
        return total / (2.0 * cfg.omega / cfg.rho + N)
    mean = total / N
    if cfg.reg == "l1":
        return shrinkage(mean, cfg.omega / (N * cfg.rho))
    return mean


def dual_update(lam, x, x0, rho):
    """``lam + rho (x - x0)``."""
    lam, x, x0 = (np.asarray(a, dtype=float) for a in (lam, x, x0))
    if not lam.shape == x.shape == x0.shape[-lam.ndim:]:
        raise ValueError("dimension mismatch in dual update")
    return lam + rho * (x - x0)


def residuals(xs, xs_prev, x0, rho):
    """Primal residual stack ``(x_i - x0)_i`` and dual residual ``sum_i rho (x_i - x_i_prev)``."""
    xs = np.asarray(xs, dtype=float)
    xs_prev = np.asarray(xs_prev, dtype=float)
    r = (xs - np.asarray(x0, dtype=float)).reshape(-1)
    s = rho * (xs - xs_prev).sum(axis=0)
    return r, s


def regularizer(x0, cfg):
    if cfg.reg == "l1":
        return cfg.omega * float(np.abs(x0).sum())
    if cfg.reg == "l2":
        return cfg.omega * float(x0 @ x0)
    return 0.0


def aug_lagrangian(losses, xs, lams, x0, cfg):
    """Global augmented Lagrangian given each worker's loss at its iterate."""
    d = np.asarray(xs) - x0
    per_worker = np.asarray(losses) + np.einsum("ij,ij->i", lams, d) + 0.5 * cfg.rho * np.einsum("ij,ij->i", d, d)
    return float(per_worker.sum()) + regularizer(x0, cfg)


def worker_streams(cfg):
    """Initial-point generator and one independent generator per worker."""
    children = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_workers + 1)
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


def initial_point(cfg, n):
    """The seeded starting point shared by x0 and every x_i."""
    init_rng, _ = worker_streams(cfg)
    return init_rng.uniform(-0.5, 0.5, n)


def choose_solve_mode(worker_id, k, cfg, rng=None, local_residual=None):
    """How worker `worker_id` handles iteration `k`.

    ``local_residual`` is ``||x_i^k - x0^k||`` from the previous iteration
    (used by sadmm); `rng` is the worker's own generator (used by ssadmm,
    which consumes exactly one draw per call so the stream stays aligned
    with k).
    """
    if cfg.mode == "ssadmm":
        if rng is None:
            raise ValueError("ssadmm needs the worker's random stream")
        u = rng.uniform()
        if k == 0:
            return EXACT
        return EXACT if u <= cfg.delta ** k else SENSITIVITY
    if k == 0 or cfg.mode == "admm":
        return EXACT
    if cfg.mode == "ladmm":
        return LINEARIZED
    if local_residual is None:
        raise ValueError("sadmm needs the previous local residual")
    return EXACT if local_residual > cfg.R else SENSITIVITY


def step(state, cfg, transport, rngs):
    """One synchronous iteration; returns ``(new_state, record)``.

    `state` is not modified, so a failing round leaves it intact.
    """
    k = state.k
    x0_new = update_x0(state.xs, state.lams, cfg)
    params = []
    for i in range(cfg.n_workers):
        local = float(np.linalg.norm(state.xs[i] - state.x0))
        how = choose_solve_mode(i, k, cfg, rngs[i], local)
        params.append(msg.RoundParams(k, x0_new, state.lams[i], _DIRECTIVES[how]))
    transport.broadcast_round(params)
    results = transport.gather_round(k)

    xs_new = np.stack([r.x for r in results])
    lams_new = np.stack([dual_update(state.lams[i], xs_new[i], x0_new, cfg.rho) for i in range(cfg.n_workers)])
    r, s = residuals(xs_new, state.xs, x0_new, cfg.rho)
    losses = np.array([r_.stats.loss for r_ in results])
    eps = np.array([r_.eps_norm for r_ in results])
    times = np.array([r_.stats.wall_time for r_ in results]) if cfg.record_timing else np.zeros(len(results))
    rec = IterationRecord(
        k=k,
        r_norm=float(np.linalg.norm(r)),
        s_norm=float(np.linalg.norm(s)),
        aug_lagrangian=aug_lagrangian(losses, xs_new, lams_new, x0_new, cfg),
        eps_max=float(eps.max()),
        nlp_solves=sum(r_.stats.mode == msg.SOLVED_EXACT for r_ in results),
        linear_solves=sum(r_.stats.linear_solves for r_ in results),
        max_worker_wall_time=float(times.max()),
        worker_modes="".join(msg.SOLVED_CODES[r_.stats.mode] for r_ in results),
        worker_eps=eps,
        worker_times=times,
        fallbacks=np.array([r_.stats.fallback for r_ in results]),
        losses=losses,
        x0=x0_new,
        xs=xs_new,
        lams=lams_new,
    )
    return GlobalState(x0_new, xs_new, lams_new, k + 1), rec


def run(cfg, problem, transport, x_init=None):
    """Iterate until both residuals are below tolerance or ``max_iter``.

    The transport is started with the shard assignments and closed on exit.
    Nonconvergence is reported through ``status``, never raised.
    """
    n = problem.n_params
    init_rng, rngs = worker_streams(cfg)
    draw = init_rng.uniform(-0.5, 0.5, n)
    x_init = draw if x_init is None else np.array(x_init, dtype=float)
    N = cfg.n_workers
    state = GlobalState(x_init, np.tile(x_init, (N, 1)), np.zeros((N, n)))
    if cfg.max_iter == 0:
        return RunResult([], "not_started", state, x_init)
    tol_p, tol_d = cfg.tolerances(n)
    trace = []
    status = "max_iter"
    transport.start(problem.assignments(cfg, x_init))
    try:
        for _ in range(cfg.max_iter):
            state, rec = step(state, cfg, transport, rngs)
            trace.append(rec)
            if cfg.early_stop and rec.r_norm <= tol_p and rec.s_norm <= tol_d:
                status = "converged"
                break
    finally:
        transport.close()
    return RunResult(trace, status, state, x_init)


@dataclass
class SharingState:
    xs: np.ndarray
    xbar: np.ndarray
    lam: np.ndarray
    k: int = 0
    workers: list = field(default=None, repr=False)


def sharing_step(state, objectives, cfg):
    """One iteration of ADMM for ``min sum f_i(x_i)`` s.t. ``sum_i x_i = 0``.

    Worker i minimizes ``f_i(x) + lam^T x + rho/2 ||x - x_i^k + xbar^k||^2``,
    which is the consensus subproblem with ``x0 = x_i^k - xbar^k`` (up to a
    constant), so the same exact and sensitivity solvers apply. Under
    ``cfg.mode`` admm every solve is exact; under sadmm the sensitivity
    update is used once ``||xbar^k|| <= R`` (k = 0 is always exact).
    Returns ``(new_state, info)`` with info holding modes and eps norms.
    """
    N = len(objectives)
    if state.workers is None:
        state.workers = [WorkerState(obj, state.xs[i].copy()) for i, obj in enumerate(objectives)]
    xs_new = np.empty_like(state.xs)
    workers = []
    modes, eps = [], []
    exact = state.k == 0 or cfg.mode == "admm" or float(np.linalg.norm(state.xbar)) > cfg.R
    for i in range(N):
        p = ParamBlock(state.xs[i] - state.xbar, state.lam)
        ws = state.workers[i]
        if exact:
            rep = solve_exact(ws, p, cfg.rho, cfg.newton_tol)
        else:
            try:
                rep = approximate_solve(ws, p, cfg.rho, cfg.D, cfg.max_correctors)
            except (SubproblemError, LinalgError):
                rep = solve_exact(ws, p, cfg.rho, cfg.newton_tol)
        workers.append(accept(ws, rep, p))
        xs_new[i] = rep.x_out
        modes.append(rep.mode)
        eps.append(rep.eps_norm)
    xbar = xs_new.mean(axis=0)
    lam = state.lam + cfg.rho * xbar
    new = SharingState(xs_new, xbar, lam, state.k + 1, workers)
    return new, {"modes": modes, "eps": np.array(eps), "xbar_norm": float(np.linalg.norm(xbar))}


def run_sharing(objectives, cfg, x_init=None):
    """Run the sharing iteration for ``cfg.max_iter`` steps (or until converged).

    Returns the final state and the list of per-iteration info dicts.
    """
    N = len(objectives)
    n = objectives[0].dim
    if x_init is None:
        x_init = np.zeros((N, n))
    xs = np.array(x_init, dtype=float).reshape(N, n)
    state = SharingState(xs, xs.mean(axis=0), np.zeros(n))
    history = []
    tol_p, tol_d = cfg.tolerances(n)
    for _ in range(cfg.max_iter):
        prev = state.xs
        state, info = sharing_step(state, objectives, cfg)
        info["s_norm"] = float(cfg.rho * np.linalg.norm(state.xs - prev))
        history.append(info)
        if cfg.early_stop and info["xbar_norm"] <= tol_p and info["s_norm"] <= tol_d:
            break
    return state, history
