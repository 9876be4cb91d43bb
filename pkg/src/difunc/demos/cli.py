"""Command-line entry points: ``difunc-mirror``, ``difunc-md`` and ``difunc-gradcheck``.

Exit codes: 0 success, 1 numeric failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from ..config import SolverConfig
from ..errors import SolverError
from .common import ensure_dir, read_points, write_csv, write_json

OK, NUMERIC_FAILURE, INVALID_CONFIG = 0, 1, 2

log = logging.getLogger("difunc.demos")


def _common(parser: argparse.ArgumentParser, iters: int, lr: float):
    parser.add_argument("--iters", type=int, default=iters, help=f"optimizer iterations (default {iters})")
    parser.add_argument("--lr", type=float, default=lr, help=f"Adam learning rate (default {lr:g})")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=".", help="output directory (created if missing)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print the final summary")


def _setup_logging(quiet: bool):
    logging.basicConfig(level=logging.ERROR if quiet else logging.WARNING, format="%(levelname)s: %(message)s")


def _finite(values) -> bool:
    return bool(np.all(np.isfinite(values)))


def mirror_main(argv=None) -> int:
    from .mirror import MirrorConfig, run

    parser = argparse.ArgumentParser(prog="difunc-mirror", description="Optimize a mirror surface to focus rays.")
    _common(parser, 500, 3e-4)
    parser.add_argument("--rays", type=int, default=25)
    parser.add_argument("--hidden", default="16,16", help="comma-separated hidden layer widths")
    parser.add_argument("--tol", type=float, default=1e-10, help="ray intersection residual tolerance")
    args = parser.parse_args(argv)
    _setup_logging(args.quiet)
    try:
        hidden = tuple(int(h) for h in args.hidden.split(",") if h)
        cfg = MirrorConfig(rays=args.rays, iters=args.iters, lr=args.lr, seed=args.seed, hidden=hidden,
                           solver=SolverConfig(tol=args.tol, max_iter=50))
        out = ensure_dir(args.out)
    except (ValueError, OSError) as exc:
        print(f"difunc-mirror: invalid config: {exc}", file=sys.stderr)
        return INVALID_CONFIG
    try:
        res = run(cfg)
    except (SolverError, ValueError, FloatingPointError) as exc:
        print(f"difunc-mirror: numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_FAILURE
    write_csv(os.path.join(out, "loss.csv"), ["iteration", "loss", "skipped_rays"],
              [(i, l, s) for i, (l, s) in enumerate(zip(res.losses, res.skipped))])
    write_csv(os.path.join(out, "rays.csv"),
              ["ray", "mirror_x", "mirror_y", "mirror_z", "hit_x", "hit_y", "hit_z", "valid"], res.rays)
    if not _finite(res.losses):
        print("difunc-mirror: numeric failure: non-finite loss", file=sys.stderr)
        return NUMERIC_FAILURE
    print(f"mirror: loss {res.losses[0]:.6g} -> {res.losses[-1]:.6g} "
          f"(ratio {res.losses[-1] / res.losses[0]:.4g}) over {cfg.iters} iterations")
    return OK


def md_main(argv=None) -> int:
    from .md import MDConfig, make_scene, run

    parser = argparse.ArgumentParser(prog="difunc-md", description="Optimize initial velocities of interacting particles.")
    _common(parser, 2000, 1e-3)
    parser.add_argument("--particles", type=int, default=8)
    parser.add_argument("--target", default="square", help="'square', 'circle', or a CSV file of x,y rows")
    parser.add_argument("--target-size", type=float, default=6.0)
    parser.add_argument("--spacing", type=float, default=2.0, help="initial grid spacing")
    parser.add_argument("--free-flight", action="store_true", help="switch the pair force off")
    parser.add_argument("--tol", type=float, default=1e-7, help="integrator relative tolerance")
    parser.add_argument("--snapshots", default="0,0.25,0.5,0.75,1", help="comma-separated sample times")
    args = parser.parse_args(argv)
    _setup_logging(args.quiet)
    try:
        kwargs = {}
        if args.target in ("square", "circle"):
            kwargs["target"] = args.target
        else:
            kwargs["target_points"] = tuple(map(tuple, read_points(args.target, 2)))
        times = tuple(float(t) for t in args.snapshots.split(",") if t.strip())
        cfg = MDConfig(particles=args.particles, iters=args.iters, lr=args.lr, seed=args.seed,
                       spacing=args.spacing, target_size=args.target_size, free_flight=args.free_flight,
                       snapshot_times=times, solver=SolverConfig(rtol=args.tol, atol=args.tol * 1e-2),
                       **kwargs)
        make_scene(cfg)
        out = ensure_dir(args.out)
    except (ValueError, OSError) as exc:
        print(f"difunc-md: invalid config: {exc}", file=sys.stderr)
        return INVALID_CONFIG
    try:
        res = run(cfg)
    except (SolverError, ValueError, FloatingPointError) as exc:
        print(f"difunc-md: numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_FAILURE
    write_csv(os.path.join(out, "loss.csv"), ["iteration", "loss", "momentum_error"],
              [(i, l, m) for i, (l, m) in enumerate(zip(res.losses, res.momentum_errors))])
    write_csv(os.path.join(out, "snapshots.csv"), ["time", "particle", "x", "y"], res.snapshots)
    if not _finite(res.losses):
        print("difunc-md: numeric failure: non-finite loss", file=sys.stderr)
        return NUMERIC_FAILURE
    print(f"md: loss {res.losses[0]:.6g} -> {res.losses[-1]:.6g} "
          f"(ratio {res.losses[-1] / res.losses[0]:.4g}), max momentum drift {max(res.momentum_errors):.3g}")
    return OK


def gradcheck_main(argv=None) -> int:
    from .gradcheck_suite import SUITES, resolve_suites, run_suites

    parser = argparse.ArgumentParser(prog="difunc-gradcheck", description="Finite-difference derivative checks.")
    parser.add_argument("--suite", action="append", default=None,
                        help=f"suite to run (repeatable): all, {', '.join(SUITES)}")
    parser.add_argument("--order", type=int, choices=(1, 2), default=1)
    parser.add_argument("--seed", type=int, default=0, help="accepted for CLI symmetry; cases are fixed")
    parser.add_argument("--eps", type=float, default=1e-6)
    parser.add_argument("--rtol", type=float, default=None, help="override every case's relative tolerance")
    parser.add_argument("--atol", type=float, default=1e-7)
    parser.add_argument("--out", default=".", help="directory for report.json")
    args = parser.parse_args(argv)
    suites = args.suite or ["all"]
    try:
        if not (args.eps > 0 and args.atol >= 0 and (args.rtol is None or args.rtol >= 0)):
            raise ValueError("eps must be positive and tolerances non-negative")
        resolve_suites(suites)
        out = ensure_dir(args.out)
    except (ValueError, OSError) as exc:
        print(f"difunc-gradcheck: invalid config: {exc}", file=sys.stderr)
        return INVALID_CONFIG
    report = run_suites(suites, order=args.order, eps=args.eps, rtol=args.rtol, atol=args.atol)
    report["order"] = args.order
    report["suites"] = suites
    write_json(os.path.join(out, "report.json"), report)
    for r in report["results"]:
        if not r["passed"]:
            print(f"FAIL {r['suite']} {r['case']} order {r['order']}: {r['message']}")
    status = "passed" if report["passed"] else "FAILED"
    print(f"gradcheck: {report['n_checks'] - report['n_failed']}/{report['n_checks']} checks {status}")
    return OK if report["passed"] else NUMERIC_FAILURE


def _entry(fn):
    def main():
        sys.exit(fn())
    return main


mirror = _entry(mirror_main)
md = _entry(md_main)
gradcheck = _entry(gradcheck_main)
