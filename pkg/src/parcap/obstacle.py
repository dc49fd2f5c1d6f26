"""Obstacle problems: reduced functions, balayage and their Riesz measures."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ppde import DiscreteMeasure, Field, SolverError, SolverParams, StepSolver, _capped
from .ptgrid import GridSpec, PointSet

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ObstacleSolution:
    R: Field
    mu: DiscreteMeasure
    contact: PointSet
    negative_mass: float = 0.0  # mass of the negative residual on contact cells (discretization error)
    iterations: list = field(default_factory=list, repr=False)

    @property
    def mass(self) -> float:
        return self.mu.mass


def _obstacle_array(psi, grid: GridSpec) -> np.ndarray:
    if isinstance(psi, Field):
        if psi.grid != grid:
            raise ValueError("obstacle lives on a different grid")
        return np.asarray(psi.values, dtype=float)
    arr = np.asarray(psi, dtype=float)
    if arr.shape != grid.shape:
        arr = np.broadcast_to(arr, grid.shape)
    return np.array(arr, dtype=float)


def solve_obstacle(psi, grid: GridSpec | None = None, params: SolverParams | None = None) -> ObstacleSolution:
    """Smallest discrete supersolution above ``psi`` with zero parabolic boundary data.

    Each implicit step solves the complementarity system
    ``phi >= 0, R >= psi, phi (R - psi) = 0`` where ``phi`` is the step
    residual; the Riesz measure is the positive part of the residual times
    the cell volume.
    """
    if grid is None:
        grid = psi.grid
    params = params or SolverParams()
    ob = _obstacle_array(psi, grid)
    if not np.isfinite(ob).all():
        raise ValueError("obstacle must be bounded")
    inner = grid.interior_mask()
    solver = StepSolver(grid, params)
    vals = np.zeros(grid.shape)
    phis = np.zeros(grid.shape)
    iters = []
    for j in range(1, grid.levels + 1):
        lower = np.where(inner, ob[j], -np.inf)
        if not vals[j - 1].any() and not (lower > 0).any():
            iters.append(0)
            continue
        try:
            u, phi, it = solver.solve(vals[j - 1], psi=np.where(inner, ob[j], 0.0), step=j)
        except SolverError as err:
            raise SolverError(
                f"obstacle step {j} failed: residual {err.residual:.3e}",
                step=j,
                residual=err.residual,
                trace=err.trace,
            ) from None
        vals[j] = u
        phis[j][inner] = phi
        iters.append(it)
    R = _capped(grid, vals, params.M_cap)
    gap = vals - ob
    contact_mask = inner[None] & (gap <= params.contact_tol)
    contact_mask[0] = False
    vol = grid.h**grid.n
    mu = DiscreteMeasure(grid, np.maximum(phis, 0.0) * vol)
    neg = float(np.maximum(-phis, 0.0)[contact_mask].sum() * vol)
    return ObstacleSolution(R, mu, PointSet.from_mask(contact_mask), neg, iters)


def reduite(psi, U: PointSet, grid: GridSpec, params: SolverParams | None = None) -> ObstacleSolution:
    """Reduced function of ``psi`` relative to ``U``: the obstacle ``psi * 1_U``.

    ``psi`` may be a scalar (``psi = 1`` gives the balayage of ``U``) or a field.
    """
    ob = np.zeros(grid.shape)
    if len(U):
        m = U.mask()
        base = _obstacle_array(psi, grid)
        ob[m] = base[m]
    return solve_obstacle(ob, grid, params)


def lambda_scaling_check(K: PointSet, lam: float, grid: GridSpec, params: SolverParams | None = None) -> float:
    """Ratio of Riesz masses ``mu(R^lam_K) / mu(R_K)``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not len(K):
        raise ValueError("degenerate K: empty set")
    if lam == 1:
        return 1.0
    base = reduite(1.0, K, grid, params).mass
    if base <= 0:
        raise ValueError("degenerate K: zero balayage mass")
    return reduite(lam, K, grid, params).mass / base


def lambda_sweep(K: PointSet, lambdas, grid: GridSpec, params: SolverParams | None = None):
    """``[(lam, ratio)]`` over a sweep, sharing the ``lam = 1`` solve."""
    base = reduite(1.0, K, grid, params).mass
    if base <= 0:
        raise ValueError("degenerate K: zero balayage mass")
    return [(float(l), 1.0 if l == 1 else reduite(l, K, grid, params).mass / base) for l in lambdas]
