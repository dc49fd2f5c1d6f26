"""Command line entry point: solve, obstacle, capacity, hausdorff, experiment."""

from __future__ import annotations

import argparse
import inspect
import json
import logging
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import capacity as cap_mod
from . import experiments as X
from . import geometry as geo
from .cache import SolveCache, atomic_write, content_hash, default_cache_dir
from .config import ConfigError, RunConfig, build_set, dust_rects, parse_config
from .obstacle import reduite
from .ppde import DiscreteMeasure, SolverError, SolverParams, solve_forward
from .ptgrid import DyadicRoot, SpaceTimePoint

log = logging.getLogger("parcap")

EXIT_OK, EXIT_FAIL, EXIT_SOLVER, EXIT_USAGE = 0, 1, 2, 3


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=X._num) + "\n"


def _cache_for(cfg: RunConfig) -> SolveCache:
    # the environment variable wins over the config file
    import os

    if os.environ.get("PARCAP_CACHE"):
        return SolveCache(default_cache_dir())
    return SolveCache(cfg.cache_dir or default_cache_dir())


def _need_set(cfg: RunConfig, name):
    if name is None:
        raise ConfigError(["--set is required"])
    if name not in cfg.sets:
        raise ConfigError([f"unknown set {name!r}; defined: {', '.join(sorted(cfg.sets)) or 'none'}"])
    return cfg.sets[name]


def _rasterized(spec, grid, name):
    K = build_set(spec, grid)
    if not len(K):
        log.warning("set %s contains no lattice cells on this grid", name)
    return K


# ------------------------------------------------------------ subcommands


def cmd_solve(cfg, args, cache, out: Path):
    grid = cfg.grid_spec(args.refine)
    params = cfg.solver_params()
    prob = cfg.problem
    key = content_hash("solve", grid.to_dict(), params.to_dict(), prob)

    def compute():
        rhs = None
        if prob["mass"] > 0:
            rhs = DiscreteMeasure.dirac(grid, SpaceTimePoint(tuple(prob["source"]), float(prob["source_t"]) or grid.tau), prob["mass"])
        init = None
        if prob["initial"] == "sine":
            init = np.ones(grid.spatial_shape)
            for x, L in zip(grid.spatial_coords(), grid.extents):
                init = init * np.sin(np.pi * x / L)
        u = solve_forward(grid, rhs, params, initial=init)
        return {"grid": grid.to_dict(), "max": u.max(), "min": u.min(), "final_l1": float(np.abs(u.values[-1]).sum() * grid.h**grid.n)}, {"u": u.values}

    payload, arrays = cache.get_or_compute_arrays(key, compute)
    atomic_write(out / "solution.npz", _npz_bytes(arrays), args.force)
    atomic_write(out / "solve.json", _dump(payload), args.force)
    return payload


def cmd_obstacle(cfg, args, cache, out: Path):
    grid = cfg.grid_spec(args.refine)
    params = cfg.solver_params()
    spec = _need_set(cfg, args.set)
    K = _rasterized(spec, grid, args.set)
    key = content_hash("obstacle", grid.to_dict(), params.to_dict(), np.packbits(K.mask().ravel()))

    def compute():
        sol = reduite(1.0, K, grid, params)
        info = {"set": args.set, "cells": len(K), "riesz_mass": sol.mass, "sup": sol.R.max(), "contact_cells": len(sol.contact), "negative_mass": sol.negative_mass}
        return info, {"R": sol.R.values, "mu": sol.mu.weights}

    payload, arrays = cache.get_or_compute_arrays(key, compute)
    atomic_write(out / "obstacle.npz", _npz_bytes(arrays), args.force)
    atomic_write(out / "obstacle.json", _dump(payload), args.force)
    return payload


def cmd_capacity(cfg, args, cache, out: Path):
    grid = cfg.grid_spec(args.refine)
    params = cfg.solver_params()
    spec = _need_set(cfg, args.set)
    K = _rasterized(spec, grid, args.set)
    methods = ["balayage", "energy", "variational"] if args.method == "all" else [args.method]
    res = {}
    for m in methods:
        kw = {"seed": args.seed if args.seed is not None else cfg.seed} if m == "variational" else {}
        res[m] = cap_mod.cached_capacity(K, grid, params, m, cache, **kw)
    payload = {"set": args.set, "cells": len(K), "estimates": res}
    atomic_write(out / "capacity.json", _dump(payload), args.force)
    return payload


def cmd_hausdorff(cfg, args, cache, out: Path):
    grid = cfg.grid_spec(args.refine)
    spec = _need_set(cfg, args.set)
    if spec["kind"] != "dyadic-fractal":
        root = DyadicRoot.for_grid(grid)
        E = _rasterized(spec, grid, args.set)
        leaf = min(args.generations, geo.default_leaf_gen(grid, root)) if args.generations else None
    else:
        root, gens = dust_rects(spec, grid, args.generations)
        E = geo.rects_to_pointset(gens[-1], grid)
        leaf = len(gens)
    delta = args.delta if args.delta is not None else root.diam(1) * (1 + 1e-9)
    cover = geo.content_upper(E, args.s, delta, grid, root, leaf)
    try:
        exact = geo.content_exact_small(E, args.s, delta, grid, root, leaf).cost
    except geo.PoolTooLarge:
        exact = None
    fm = geo.frostman_measure(E, args.s, grid, root, leaf)
    payload = {"upper": cover.cost, "exact": exact, "frostman_mass": fm.mass, "certificate_ok": fm.certificate_ok()}
    atomic_write(out / "hausdorff.json", _dump(payload), args.force)
    return payload


def _experiment_kwargs(cfg, eid, seed):
    kw = dict(cfg.experiment_params.get(eid, {}))
    sig = inspect.signature(X.EXPERIMENTS[eid]).parameters
    unknown = [k for k in kw if k not in sig]
    if unknown:
        raise ConfigError([f"experiment {eid} has no parameter {k!r}" for k in unknown])
    if seed is not None:
        if "seed" in sig:
            kw["seed"] = seed
        if "dust" in sig:
            kw["dust"] = {**(kw.get("dust") or {}), "seed": seed}
    return kw


def cmd_experiment(cfg, args, cache, out: Path):
    ids = list(X.EXPERIMENTS) if args.id == "all" else [args.id]
    if args.id not in X.EXPERIMENTS and args.id != "all":
        raise ConfigError([f"unknown experiment {args.id!r}"])
    params = cfg.solver_params()
    seed = args.seed
    kwargs = {eid: _experiment_kwargs(cfg, eid, seed) for eid in ids}

    def one(eid):
        try:
            rep = X.run_experiment(eid, kwargs[eid], params, cache)
        except (SolverError, ValueError, ArithmeticError) as err:
            # one failing experiment must not take down the others
            atomic_write(out / eid / ".failed", f"{type(err).__name__}: {err}\n", True)
            return eid, None, f"{type(err).__name__}: {err}"
        X.write_report(rep, out / eid, args.force)
        return eid, rep, None

    threads = args.threads or cfg.threads
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one, ids))
    summary = {}
    failed = False
    for eid, rep, err in results:
        if rep is None:
            summary[eid] = {"passed": False, "error": err}
            failed = True
        else:
            summary[eid] = {"passed": rep.passed, "criteria": [c.to_dict() for c in rep.criteria]}
    if args.id == "all":
        atomic_write(out / "summary.json", _dump(summary), args.force)
    if failed:
        raise SolverError("experiment solver failure: " + ", ".join(e for e, r, _ in results if r is None))
    return summary


def _npz_bytes(arrays: dict) -> bytes:
    import io

    buf = io.BytesIO()
    np.savez_compressed(buf, **{k: np.asarray(v) for k, v in sorted(arrays.items())})
    return buf.getvalue()


COMMANDS = {"solve": cmd_solve, "obstacle": cmd_obstacle, "capacity": cmd_capacity, "hausdorff": cmd_hausdorff, "experiment": cmd_experiment}


# ------------------------------------------------------------ plumbing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML run configuration")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--refine", type=int, default=argparse.SUPPRESS, help="halve h and tau this many times")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite existing outputs")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="parcap", parents=[common], description="p-parabolic capacities at desk scale")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="forward solve with a point source")
    p = sub.add_parser("obstacle", parents=[common], help="balayage of a configured set")
    p.add_argument("--set", required=True)
    p = sub.add_parser("capacity", parents=[common], help="capacity estimates of a configured set")
    p.add_argument("--set", required=True)
    p.add_argument("--method", default="balayage", choices=["balayage", "energy", "variational", "all"])
    p = sub.add_parser("hausdorff", parents=[common], help="Hausdorff content and Frostman mass")
    p.add_argument("--set", required=True)
    p.add_argument("--s", type=float, required=True)
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p = sub.add_parser("experiment", parents=[common], help="run one experiment or 'all'")
    p.add_argument("id")
    return ap


def _resolve(args):
    defaults = {"config": None, "out": None, "threads": None, "refine": 0, "force": False, "seed": None, "verbose": False}
    for k, v in defaults.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    return args


def main(argv=None) -> int:
    args = _resolve(build_parser().parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else ""
        cfg = parse_config(text)
    except ConfigError as err:
        for e in err.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out or cfg.output_dir)
    cache = _cache_for(cfg)
    try:
        payload = COMMANDS[args.command](cfg, args, cache, out)
    except ConfigError as err:
        for e in err.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileExistsError as err:
        print(str(err), file=sys.stderr)
        return EXIT_USAGE
    except SolverError as err:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / ".failed", "".join(traceback.format_exception_only(type(err), err)), True)
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    log.info("cache hits %d misses %d corrupt %d", cache.hits, cache.misses, cache.corrupt)
    if args.command == "experiment":
        print(_dump({k: v["passed"] for k, v in payload.items()}), end="")
        return EXIT_OK if all(v["passed"] for v in payload.values()) else EXIT_FAIL
    print(_dump(payload), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
