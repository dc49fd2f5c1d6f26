"""Run configuration: TOML parsing with full error collection, and emission."""

from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ppde import SolverParams
from .ptgrid import Box, Disc, DyadicRoot, GridSpec, ParabolicCylinder, PointSet, ShapeUnion, SpaceTimePoint, rasterize


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


GRID_DEFAULTS = {"n": 1, "p": "3", "h": 1 / 64, "tau": 1 / 256, "T": 1.0, "extents": [1.0]}
SOLVER_DEFAULTS = {"newton_tol": 1e-10, "max_iter": 50, "damping": 0.5, "M_cap": 1e6}
PROBLEM_DEFAULTS = {"source": [0.5], "source_t": 0.0, "mass": 0.05, "initial": "zero"}
TOP_KEYS = {"output_dir", "threads", "cache_dir", "seed", "grid", "solver", "sets", "experiment", "problem"}
SET_FIELDS = {
    "cylinder": ({"center", "t", "radius"}, {"variant"}),
    "box": ({"lo", "hi", "t0", "t1"}, set()),
    "disc": ({"center", "radius", "t"}, set()),
    "union": ({"parts"}, set()),
    "dyadic-fractal": ({"origin", "t0", "r0", "depth", "keep"}, {"seed"}),
}


@dataclass
class RunConfig:
    grid: dict = field(default_factory=lambda: dict(GRID_DEFAULTS))
    solver: dict = field(default_factory=lambda: dict(SOLVER_DEFAULTS))
    sets: dict = field(default_factory=dict)
    experiments: list = field(default_factory=list)
    experiment_params: dict = field(default_factory=dict)
    problem: dict = field(default_factory=lambda: dict(PROBLEM_DEFAULTS))
    output_dir: str = "parcap-out"
    threads: int = 1
    cache_dir: str = ""
    seed: int = 0

    def grid_spec(self, refine: int = 0) -> GridSpec:
        g = self.grid
        spec = GridSpec(g["n"], tuple(g["extents"]), g["h"], g["tau"], g["T"], Fraction(g["p"]))
        for _ in range(refine):
            spec = spec.refined(2, 2)
        return spec

    def solver_params(self) -> SolverParams:
        return SolverParams(**self.solver)


def parse_p(value, errors: list):
    """Normalize ``p`` to the string ``"k/l"`` (or ``"k"``); record problems in ``errors``."""
    try:
        if isinstance(value, bool):
            raise TypeError
        if isinstance(value, str):
            frac = Fraction(value.strip())
        elif isinstance(value, int):
            frac = Fraction(value)
        elif isinstance(value, float):
            if not math.isfinite(value):
                raise ValueError
            frac = Fraction(value)
            if frac.denominator > 3:
                frac = Fraction(value).limit_denominator(3)
                if abs(float(frac) - value) > 1e-12:
                    errors.append("p must be rational k/l")
                    return None
        else:
            raise TypeError
    except (TypeError, ValueError, ZeroDivisionError):
        errors.append("p must be rational k/l")
        return None
    if frac <= 2:
        errors.append("p must exceed 2")
        return None
    if frac.denominator > 3 or frac.numerator > 9:
        errors.append(f"p must be rational k/l with k <= 9 and l <= 3 (got {frac})")
        return None
    return str(frac)


def _unknown(block: dict, allowed, where: str, errors: list):
    for k in block:
        if k not in allowed:
            errors.append(f"unknown key {where}{k!r}")


def _number(block, key, where, errors, positive=True, integer=False):
    v = block[key]
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    if ok and integer and not float(v).is_integer():
        ok = False
    if ok and positive and not v > 0:
        ok = False
    if not ok:
        kind = "positive " if positive else ""
        errors.append(f"{where}{key} must be a {kind}{'integer' if integer else 'number'}")
    return ok


def _check_set(name, spec, errors, where="sets."):
    if not isinstance(spec, dict):
        errors.append(f"{where}{name} must be a table")
        return
    kind = spec.get("kind")
    if kind not in SET_FIELDS:
        errors.append(f"{where}{name}.kind must be one of {', '.join(SET_FIELDS)}")
        return
    need, opt = SET_FIELDS[kind]
    for k in sorted(need - set(spec)):
        errors.append(f"{where}{name} ({kind}) is missing {k!r}")
    _unknown(spec, need | opt | {"kind"}, f"{where}{name}.", errors)
    if kind == "union" and isinstance(spec.get("parts"), list):
        for i, part in enumerate(spec["parts"]):
            _check_set(f"{name}.parts[{i}]", part, errors, where)


def parse_config(text: str) -> RunConfig:
    """Validated :class:`RunConfig` from TOML text; raises :class:`ConfigError` listing every problem."""
    errors = []
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([f"TOML syntax: {err}"]) from None
    cfg = RunConfig()
    _unknown(doc, TOP_KEYS, "", errors)

    grid = dict(GRID_DEFAULTS)
    gblock = doc.get("grid", {})
    _unknown(gblock, GRID_DEFAULTS, "grid.", errors)
    grid.update(gblock)
    if "p" in gblock:
        grid["p"] = parse_p(gblock["p"], errors)
    else:
        grid["p"] = parse_p(grid["p"], errors)
    if grid["n"] not in (1, 2) or isinstance(grid["n"], bool):
        errors.append("grid.n must be 1 or 2")
    for k in ("h", "tau", "T"):
        _number(grid, k, "grid.", errors)
    ext = grid["extents"]
    if not (isinstance(ext, list) and ext and all(isinstance(e, (int, float)) and e > 0 for e in ext)):
        errors.append("grid.extents must be a list of positive lengths")
    elif isinstance(grid["n"], int) and len(ext) != grid["n"]:
        errors.append("grid.extents must have n entries")
    grid["extents"] = [float(e) for e in ext] if isinstance(ext, list) else ext
    for k in ("h", "tau", "T"):
        if isinstance(grid[k], int) and not isinstance(grid[k], bool):
            grid[k] = float(grid[k])
    cfg.grid = grid
    if not errors:
        try:
            cfg.grid_spec()
        except ValueError as err:
            errors.append(f"grid: {err}")

    solver = dict(SOLVER_DEFAULTS)
    sblock = doc.get("solver", {})
    _unknown(sblock, set(SOLVER_DEFAULTS) | {"eps"}, "solver.", errors)
    solver.update(sblock)
    for k in ("newton_tol", "M_cap"):
        _number(solver, k, "solver.", errors)
    _number(solver, "max_iter", "solver.", errors, integer=True)
    if _number(solver, "damping", "solver.", errors) and not solver["damping"] < 1:
        errors.append("solver.damping must lie in (0, 1)")
    if "eps" in solver:
        _number(solver, "eps", "solver.", errors, positive=False)
    for k in ("newton_tol", "M_cap", "damping"):
        if isinstance(solver[k], int) and not isinstance(solver[k], bool):
            solver[k] = float(solver[k])
    cfg.solver = solver

    sets = doc.get("sets", {})
    if not isinstance(sets, dict):
        errors.append("sets must be a table of named set blocks")
        sets = {}
    for name, spec in sets.items():
        _check_set(name, spec, errors)
    cfg.sets = sets

    exp = doc.get("experiment", {})
    _unknown(exp, {"ids", "params"}, "experiment.", errors)
    from .experiments import EXPERIMENTS

    ids = exp.get("ids", [])
    if not isinstance(ids, list):
        errors.append("experiment.ids must be a list")
        ids = []
    for i in ids:
        if i != "all" and i not in EXPERIMENTS:
            errors.append(f"unknown experiment {i!r}")
    cfg.experiments = ids
    params = exp.get("params", {})
    for eid in params:
        if eid not in EXPERIMENTS:
            errors.append(f"experiment.params names unknown experiment {eid!r}")
    cfg.experiment_params = params

    problem = dict(PROBLEM_DEFAULTS)
    pblock = doc.get("problem", {})
    _unknown(pblock, PROBLEM_DEFAULTS, "problem.", errors)
    problem.update(pblock)
    if problem["initial"] not in ("zero", "sine"):
        errors.append("problem.initial must be 'zero' or 'sine'")
    cfg.problem = problem

    cfg.output_dir = str(doc.get("output_dir", cfg.output_dir))
    cfg.cache_dir = str(doc.get("cache_dir", cfg.cache_dir))
    for k in ("threads", "seed"):
        if k in doc:
            v = doc[k]
            if not isinstance(v, int) or isinstance(v, bool) or v < (1 if k == "threads" else 0):
                errors.append(f"{k} must be a {'positive' if k == 'threads' else 'nonnegative'} integer")
            else:
                setattr(cfg, k, v)
    if errors:
        raise ConfigError(errors)
    return cfg


def emit_config(cfg: RunConfig) -> str:
    doc = {
        "output_dir": cfg.output_dir,
        "threads": cfg.threads,
        "cache_dir": cfg.cache_dir,
        "seed": cfg.seed,
        "grid": cfg.grid,
        "solver": cfg.solver,
        "problem": cfg.problem,
    }
    if cfg.sets:
        doc["sets"] = cfg.sets
    if cfg.experiments or cfg.experiment_params:
        doc["experiment"] = {"ids": cfg.experiments}
        if cfg.experiment_params:
            doc["experiment"]["params"] = cfg.experiment_params
    return tomli_w.dumps(copy.deepcopy(doc))


# ------------------------------------------------------------ set blocks


def build_shape(spec: dict):
    kind = spec["kind"]
    if kind == "cylinder":
        return ParabolicCylinder(SpaceTimePoint(tuple(spec["center"]), float(spec["t"])), float(spec["radius"]), spec.get("variant", "full"))
    if kind == "box":
        return Box(tuple(spec["lo"]), tuple(spec["hi"]), float(spec["t0"]), float(spec["t1"]))
    if kind == "disc":
        return Disc(tuple(spec["center"]), float(spec["radius"]), float(spec["t"]))
    if kind == "union":
        return ShapeUnion(tuple(build_shape(s) for s in spec["parts"]))
    raise ValueError(f"{kind} is not a geometric shape")


def dust_root(spec: dict, grid: GridSpec) -> DyadicRoot:
    return DyadicRoot(tuple(spec["origin"]), float(spec["t0"]), float(spec["r0"]), grid.p, grid.n)


def dust_rects(spec: dict, grid: GridSpec, generations: int | None = None):
    from .experiments import dust_levels

    root = dust_root(spec, grid)
    depth = int(spec["depth"] if generations is None else generations)
    keep = spec["keep"]
    keeps = tuple(keep) if isinstance(keep, list) else (int(keep),)
    rng = np.random.default_rng(spec.get("seed", 0))
    return root, dust_levels(root, keeps, depth, rng)


def build_set(spec: dict, grid: GridSpec, generations: int | None = None) -> PointSet:
    if spec["kind"] == "dyadic-fractal":
        from .geometry import rects_to_pointset

        _, gens = dust_rects(spec, grid, generations)
        return rects_to_pointset(gens[-1], grid) if gens else PointSet.empty(grid)
    return rasterize(build_shape(spec), grid)
