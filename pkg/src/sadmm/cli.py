"""Command-line entry points.

Exit codes: 0 success (a run that hit max_iter still succeeds), 1 usage,
2 data or configuration error, 3 solver error or failed check, 4 transport
error.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import messages as msg
from .consensus import ConfigError, run
from .dataio import (
    DataError,
    RunConfig,
    build_problem,
    ensure_dir,
    fit_metrics,
    load_dataset,
    load_run_config,
    normalize,
    write_metrics,
)
from .linalg import LinalgError
from .models import ModelError
from .subproblem import SubproblemError
from .transport import LoopbackTransport, RemoteSolveError, TcpTransport, serve_worker, spawn_local_workers

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER, EXIT_TRANSPORT = 0, 1, 2, 3, 4
MASTER_ENV = "SADMM_MASTER"

OVERRIDES = {
    "rho": ("rho", float),
    "R": ("R", float),
    "D": ("D", float),
    "delta": ("delta", float),
    "mu": ("mu", float),
    "seed": ("rng_seed", int),
    "mode": ("mode", str),
    "max_iter": ("max_iter", int),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this tool reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _address(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _add_overrides(p):
    p.add_argument("--rho", type=float)
    p.add_argument("--R", type=float)
    p.add_argument("--D", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["admm", "sadmm", "ssadmm", "ladmm"])
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--transport", choices=["loopback", "tcp"])
    p.add_argument("--no-timing", action="store_true", help="write zero wall times (bitwise-comparable output)")


def build_parser():
    parser = _Parser(prog="sadmm", description="Consensus ADMM with sensitivity-based subproblems.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("run", help="run one experiment and write its metrics CSV")
    p.add_argument("config")
    _add_overrides(p)

    p = sub.add_parser("compare", help="run several modes from the same initial state")
    p.add_argument("config")
    p.add_argument("--modes", default="admm,sadmm,ssadmm,ladmm")
    _add_overrides(p)

    p = sub.add_parser("check", help="run a verification suite")
    p.add_argument("suite", choices=["gradcheck", "invariants", "theory"])
    p.add_argument("--seeds", type=int, default=100)

    p = sub.add_parser("serve-master", help="run as TCP master, waiting for external workers")
    p.add_argument("config")
    p.add_argument("--bind", type=_address, default=("127.0.0.1", 0))
    _add_overrides(p)

    p = sub.add_parser("serve-worker", help="run as TCP worker")
    p.add_argument("--master", type=_address, default=None,
                   help=f"master host:port (default: ${MASTER_ENV})")
    p.add_argument("--worker-id", dest="worker_id", type=int, required=True)
    p.add_argument("--connect-timeout", type=float, default=30.0)

    p = sub.add_parser("bench", help="time exact versus sensitivity worker solves")
    p.add_argument("config")
    _add_overrides(p)
    return parser


def apply_overrides(run_cfg, args):
    """Return a new RunConfig with command-line overrides applied, plus the list of them."""
    d = run_cfg.to_dict()
    applied = {}
    for flag, (key, _) in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            d["solver"][key] = v
            applied[flag] = v
    if getattr(args, "no_timing", False):
        d["solver"]["record_timing"] = False
        applied["no_timing"] = True
    if getattr(args, "transport", None):
        d["transport"]["kind"] = args.transport
        applied["transport"] = args.transport
    if getattr(args, "out", None):
        d["output_dir"] = args.out
        applied["out"] = args.out
    return RunConfig.from_dict(d), applied


def _transport_for(run_cfg):
    t = run_cfg.transport
    if t["kind"] == "loopback":
        return LoopbackTransport(int(t.get("threads", 1))), None
    tcp = TcpTransport(t.get("host", "127.0.0.1"), int(t.get("port", 0)), float(t.get("timeout", 600)))
    host, port = tcp.address
    procs = spawn_local_workers(host, port, run_cfg.solver.n_workers)
    return tcp, procs


def _reap(procs):
    for p in procs or []:
        try:
            p.wait(timeout=30)
        except Exception:
            p.kill()


def execute(run_cfg, transport=None, label=None, overrides=None, x_init=None):
    """Run `run_cfg`, write ``metrics_<label>.csv`` and its metadata; return ``(result, path)``."""
    problem, stats = build_problem(run_cfg)
    procs = None
    if transport is None:
        transport, procs = _transport_for(run_cfg)
    t0 = time.perf_counter()
    try:
        result = run(run_cfg.solver, problem, transport, x_init=x_init)
    finally:
        _reap(procs)
    wall = time.perf_counter() - t0
    out = ensure_dir(run_cfg.output_dir)
    label = label or run_cfg.solver.mode
    path = os.path.join(out, f"metrics_{label}.csv")
    ds, _ = normalize(load_dataset(run_cfg.dataset), labels=run_cfg.normalize_labels)
    meta = {
        "config": run_cfg.to_dict(),
        "overrides": overrides or {},
        "status": result.status,
        "iterations": len(result.trace),
        "normalization": stats.to_dict(),
        "fit": fit_metrics(run_cfg.model, result.state.x0, ds) if result.trace else {},
        "x0_final": result.state.x0.tolist(),
    }
    write_metrics(result.trace, path, meta)
    return result, path, wall


def summary_line(label, result, wall):
    if not result.trace:
        return f"{label}: status={result.status} iterations=0"
    last = result.trace[-1]
    nlp = sum(r.nlp_solves for r in result.trace)
    return (
        f"{label}: status={result.status} iterations={len(result.trace)} "
        f"r={last.r_norm:.6g} s={last.s_norm:.6g} aug_lagrangian={last.aug_lagrangian:.10g} "
        f"nlp_solves={nlp} wall={wall:.3f}s"
    )


def cmd_run(args):
    run_cfg, applied = apply_overrides(load_run_config(args.config), args)
    result, path, wall = execute(run_cfg, overrides=applied)
    print(summary_line(run_cfg.solver.mode, result, wall))
    print(f"metrics: {path}")
    return EXIT_OK


def cmd_compare(args):
    base, applied = apply_overrides(load_run_config(args.config), args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ("admm", "sadmm", "ssadmm", "ladmm"):
            raise UsageError(f"unknown mode {m!r}")
    for m in modes:
        d = base.to_dict()
        d["solver"]["mode"] = m
        cfg = RunConfig.from_dict(d)
        result, path, wall = execute(cfg, overrides=dict(applied, mode=m))
        print(summary_line(m, result, wall))
    return EXIT_OK


def cmd_serve_master(args):
    run_cfg, applied = apply_overrides(load_run_config(args.config), args)
    host, port = args.bind
    tcp = TcpTransport(host, port, float(run_cfg.transport.get("timeout", 600)))
    h, p = tcp.address
    print(f"listening on {h}:{p} for {run_cfg.solver.n_workers} workers", flush=True)
    result, path, wall = execute(run_cfg, transport=tcp, overrides=applied)
    print(summary_line(run_cfg.solver.mode, result, wall))
    print(f"metrics: {path}")
    return EXIT_OK


def cmd_serve_worker(args):
    addr = args.master
    if addr is None:
        env = os.environ.get(MASTER_ENV)
        if not env:
            raise UsageError(f"no --master given and ${MASTER_ENV} is not set")
        try:
            addr = _address(env)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(str(exc)) from None
    serve_worker(addr[0], addr[1], args.worker_id, args.connect_timeout)
    return EXIT_OK


def cmd_bench(args):
    run_cfg, applied = apply_overrides(load_run_config(args.config), args)
    result, path, wall = execute(run_cfg, overrides=applied)
    exact, sens = [], []
    for rec in result.trace:
        for mode, t in zip(rec.worker_modes, rec.worker_times):
            (exact if mode == "e" else sens if mode in "pc" else []).append(t)
    print(summary_line(run_cfg.solver.mode, result, wall))
    print(f"exact solves: {len(exact)}  median {np.median(exact) * 1e3 if exact else float('nan'):.3f} ms")
    print(f"sensitivity updates: {len(sens)}  median {np.median(sens) * 1e3 if sens else float('nan'):.3f} ms")
    if exact and sens:
        print(f"median time ratio sensitivity/exact: {np.median(sens) / np.median(exact):.4f}")
    return EXIT_OK


def cmd_check(args):
    from . import checks

    suite = {"gradcheck": checks.gradcheck, "invariants": checks.invariants, "theory": checks.theory}[args.suite]
    failures = 0
    for name, ok, detail in suite(seeds=args.seeds):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += not ok
    print(f"{args.suite}: {'all passed' if not failures else f'{failures} failed'}")
    return EXIT_OK if not failures else EXIT_SOLVER


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "check": cmd_check,
    "serve-master": cmd_serve_master,
    "serve-worker": cmd_serve_worker,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, ModelError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SubproblemError, RemoteSolveError, LinalgError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (msg.TransportError, ConnectionError, TimeoutError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
