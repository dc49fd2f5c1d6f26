"""Capacity estimators (balayage mass, energy, variational), norms, inner/outer capacities."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .obstacle import reduite
from .ppde import DiscreteMeasure, Field, PLaplacian, SolverError, SolverParams
from .ptgrid import GridSpec, PointSet

log = logging.getLogger(__name__)


class MarginError(ValueError):
    """The set comes closer than one cell to the parabolic boundary."""


class DescentWarning(UserWarning):
    pass


@dataclass
class CapacityEstimate:
    value: float
    method: str
    grid: dict
    trace: list = field(default_factory=list)
    T_stable: bool | None = None
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "value": self.value,
            "method": self.method,
            "grid": self.grid,
            "trace": [list(t) if isinstance(t, tuple) else t for t in self.trace],
            "T_stable": self.T_stable,
            "warnings": list(self.warnings),
        }


@dataclass
class NormReport:
    v_norm: float
    vdual_norm: float
    w_norm: float
    energy: float


def _check_margin(K: PointSet, min_margin: int = 2):
    if len(K) and K.margin() < min_margin:
        raise MarginError("set violates the one-cell margin from the parabolic boundary")


# ------------------------------------------------------------------ norms


def energy(u: Field) -> float:
    """``max_t sum u^2 h^n + sum_t tau sum_T |T| |grad u|^p``."""
    g = u.grid
    v = u.values
    op = PLaplacian(g, 0.0)
    vol = g.h**g.n
    sup_l2 = float(max(np.sum(v[j] ** 2) * vol for j in range(g.levels + 1)))
    grad = sum(op.grad_power_integral(v[j]) for j in range(1, g.levels + 1)) * g.tau
    return sup_l2 + float(grad)


def v_norm(u: Field) -> float:
    g = u.grid
    op = PLaplacian(g, 0.0)
    s = sum(op.grad_power_integral(u.values[j]) for j in range(1, g.levels + 1)) * g.tau
    return float(s) ** (1.0 / g.pf)


def _slice_dual_1d(v: np.ndarray, grid: GridSpec, p: float):
    """Exact discrete solves of ``-Delta_p w = v`` on many 1D slices at once.

    ``v`` has shape ``(S, N+1)`` (boundary entries ignored).  The face fluxes
    are ``F_e = F_0 - h * cumsum(v)``; ``F_0`` is fixed by the zero boundary
    values, found by bisection (the constraint is monotone in ``F_0``).
    Returns ``w`` of the same shape.
    """
    h = grid.h
    vi = v[:, 1:-1]
    S = np.zeros((v.shape[0], vi.shape[1] + 1))
    S[:, 1:] = h * np.cumsum(vi, axis=1)
    q = 1.0 / (p - 1)

    def slopes(F0):
        F = F0[:, None] - S
        return np.sign(F) * np.abs(F) ** q

    lo = S.min(axis=1)
    hi = S.max(axis=1)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        G = slopes(mid).sum(axis=1)
        pos = G > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(1.0, np.abs(hi))):
            break
    g = slopes(0.5 * (lo + hi))
    w = np.zeros_like(v, dtype=float)
    w[:, 1:] = h * np.cumsum(g, axis=1)
    # remove the tiny closure defect by a linear correction
    w -= np.outer(w[:, -1], np.linspace(0.0, 1.0, v.shape[1]))
    return w


def _slice_dual_nd(v: np.ndarray, grid: GridSpec, p: float, tol=1e-12, max_iter=200):
    """Newton solve of ``-Delta_p w = v`` (zero boundary) on one 2D slice."""
    op = PLaplacian(grid, 0.0, p)
    inner = grid.interior_mask()
    vol = grid.h**grid.n
    w = np.zeros(grid.spatial_shape)
    if not np.any(v[inner]):
        return w
    scale = max(float(np.abs(v[inner]).max()), 1e-300)
    floor = 1e-6 * scale ** (1.0 / (p - 1))

    def obj(wf):
        return op.energy(wf, 0.0) - vol * float((v * wf)[inner].sum())

    import scipy.sparse as sp
    from scipy.sparse.linalg import spsolve

    for it in range(max_iter):
        r = op.gradient(w, 0.0)[inner] - vol * v[inner]
        if np.abs(r).max() <= tol * vol * scale:
            break
        H = op.hessian(w, 0.0, floor=floor) + sp.identity(len(r)) * (1e-14 * vol)
        d = -spsolve(H.tocsc(), r)
        F0 = obj(w)
        alpha = 1.0
        while alpha > 1e-12:
            trial = w.copy()
            trial[inner] += alpha * d
            if obj(trial) <= F0 + 1e-4 * alpha * float(r @ d):
                break
            alpha *= 0.5
        w = trial
        floor *= 0.5
    else:
        raise SolverError("dual slice solve did not converge", residual=float(np.abs(r).max()))
    return w


def dual_potentials(v: np.ndarray, grid: GridSpec, p: float | None = None) -> np.ndarray:
    """Slice-wise solutions ``w_j`` of ``-Delta_p w_j = v_j``; ``v`` is a node array."""
    p = grid.pf if p is None else float(p)
    if grid.n == 1:
        return _slice_dual_1d(v.reshape(v.shape[0], -1), grid, p)
    return np.stack([_slice_dual_nd(vj, grid, p) for vj in v])


def dual_norm(v, grid: GridSpec | None = None, p: float | None = None, levels=None) -> float:
    """Dual norm of a density field paired slice-wise against gradient-``L^p`` test functions.

    Equals ``(sum_j tau ||grad w_j||_p^p)^(1/p')`` with ``w_j`` the p-Laplace
    potential of the slice.  Levels default to ``1..M``.
    """
    if isinstance(v, Field):
        grid = v.grid
        v = v.values
    p = grid.pf if p is None else float(p)
    if levels is None:
        levels = slice(1, None)
    vv = np.asarray(v, dtype=float)[levels]
    if not np.any(vv):
        return 0.0
    w = dual_potentials(vv, grid, p)
    op = PLaplacian(grid, 0.0, p)
    total = sum(op.grad_power_integral(wj) for wj in w) * grid.tau
    pp = p / (p - 1)
    return float(total) ** (1.0 / pp)


def time_derivative(u: Field) -> np.ndarray:
    """Backward differences ``(u_j - u_{j-1}) / tau``; level 0 is zero."""
    g = u.grid
    out = np.zeros(g.shape)
    out[1:] = np.diff(u.values, axis=0) / g.tau
    return out


def norms(u: Field) -> NormReport:
    g = u.grid
    p = g.pf
    vn = v_norm(u)
    dn = dual_norm(time_derivative(u), g, p)
    return NormReport(vn, dn, vn**p + dn ** (p / (p - 1)), energy(u))


def w_norm(u: Field) -> float:
    return norms(u).w_norm


# -------------------------------------------------------------- capacities


def cap_balayage(K: PointSet, grid: GridSpec, params: SolverParams | None = None, check_T: bool = False):
    """Total Riesz mass of the balayage of ``K``."""
    _check_margin(K)
    if not len(K):
        return CapacityEstimate(0.0, "balayage-mass", grid.to_dict(), [(grid.cells, 0.0)], True)
    sol = reduite(1.0, K, grid, params)
    val = sol.mass
    est = CapacityEstimate(val, "balayage-mass", grid.to_dict(), [(grid.cells, val)], extra={"solution": sol})
    if check_T:
        est.T_stable = _T_stable(K, grid, params, val)
    return est


def _extend_in_time(K: PointSet, grid: GridSpec) -> tuple[PointSet, GridSpec]:
    g2 = GridSpec(grid.n, grid.extents, grid.h, grid.tau, 2 * grid.T, grid.p)
    m = np.zeros(g2.shape, dtype=bool)
    m[: grid.levels + 1] = K.mask()
    return PointSet.from_mask(m), g2


def _T_stable(K, grid, params, val):
    K2, g2 = _extend_in_time(K, grid)
    v2 = reduite(1.0, K2, g2, params).mass
    return abs(v2 - val) <= 0.01 * max(abs(val), 1e-300)


def cap_energy(K: PointSet, grid: GridSpec, params: SolverParams | None = None):
    """Energy of the balayage of ``K`` (an admissible competitor for the energy capacity)."""
    _check_margin(K)
    if not len(K):
        return CapacityEstimate(0.0, "energy", grid.to_dict(), [(grid.cells, 0.0)], True)
    sol = reduite(1.0, K, grid, params)
    val = energy(sol.R)
    return CapacityEstimate(val, "energy", grid.to_dict(), [(grid.cells, val)], extra={"solution": sol})


class VariationalProblem:
    """The functional ``||grad phi||_p^p + ||phi_t||_dual^{p'}`` over lattice fields.

    Unknowns are interior nodes of levels ``1..M-1``; level 0 and level M
    are held at zero.
    """

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.p = grid.pf
        self.pp = self.p / (self.p - 1)
        self.op = PLaplacian(grid, 0.0)
        self.inner = grid.interior_mask()
        self.mask = np.zeros(grid.shape, dtype=bool)
        self.mask[1:-1] = self.inner
        self.size = int(self.mask.sum())
        self.evaluations = 0

    def embed(self, x):
        phi = np.zeros(self.grid.shape)
        phi[self.mask] = x
        return phi

    def value_and_grad(self, x):
        self.evaluations += 1
        g = self.grid
        phi = self.embed(x)
        tau = g.tau
        vol = g.h**g.n
        grad = np.zeros(g.shape)
        if g.n == 1:
            slope = np.diff(phi, axis=1) / g.h
            a = np.abs(slope)
            term1 = tau * g.h * float(np.sum(a**self.p))
            flux = self.p * tau * a ** (self.p - 2) * slope
            grad[:, :-1] -= flux
            grad[:, 1:] += flux
        else:
            term1 = 0.0
            for j in range(1, g.levels):
                if not phi[j].any():
                    continue
                term1 += self.op.grad_power_integral(phi[j])
                grad[j] = self.p * tau * self.op.gradient(phi[j], 0.0)
            term1 *= tau
        v = np.diff(phi, axis=0) / tau  # v[j-1] pairs with level j
        active = np.flatnonzero(np.any(v != 0, axis=tuple(range(1, v.ndim))))
        term2 = 0.0
        if len(active):
            w = np.zeros_like(v)
            w[active] = dual_potentials(v[active], g, self.p)
            if g.n == 1:
                term2 = g.h * float(np.sum(np.abs(np.diff(w, axis=1) / g.h) ** self.p))
            else:
                term2 = sum(self.op.grad_power_integral(w[j]) for j in active)
            term2 *= tau
            # d/dphi_j of sum tau N(v)^p' = p' h^n (w_j - w_{j+1})
            grad[:-1] -= self.pp * vol * w
            grad[1:] += self.pp * vol * w
        return term1 + term2, grad[self.mask], term1, term2


def cap_variational(
    K: PointSet,
    grid: GridSpec,
    params: SolverParams | None = None,
    starts: int = 1,
    seed: int = 0,
    maxiter: int = 2000,
    phi0: np.ndarray | None = None,
    gtol: float = 1e-9,
):
    """Minimize the variational functional over ``phi >= 1_K`` (bound-constrained L-BFGS).

    The starting point is the balayage of ``K`` cut off linearly to zero at
    the final level; extra starts perturb it randomly.  Returns the best
    objective value found, an upper bound on the discrete infimum.
    """
    _check_margin(K)
    if not len(K):
        return CapacityEstimate(0.0, "variational", grid.to_dict(), [(grid.cells, 0.0)], True)
    if K.mask()[-1].any():
        raise MarginError("set touches the terminal level")
    prob = VariationalProblem(grid)
    lower = K.mask()[prob.mask].astype(float)
    bounds = [(lo, None) for lo in lower]
    if phi0 is None:
        R = reduite(1.0, K, grid, params).R.values
        t = grid.times()
        cut = np.clip((grid.T - t) / max(grid.T - t[K.cells[:, 0].max()], grid.tau), 0.0, 1.0)
        phi0 = R * cut.reshape((-1,) + (1,) * grid.n)
    x0 = np.maximum(np.asarray(phi0)[prob.mask], lower)
    rng = np.random.default_rng(seed)
    best = None
    trace = []
    warns = []
    for s in range(max(1, starts)):
        xs = x0 if s == 0 else np.maximum(x0 * rng.uniform(0.5, 1.5, size=x0.shape), lower)
        res = minimize(
            lambda x: prob.value_and_grad(x)[:2],
            xs,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": maxiter, "maxcor": 20, "ftol": 1e-13, "gtol": gtol},
        )
        x = np.maximum(res.x, lower)  # final feasibility pass
        val = prob.value_and_grad(x)[0]
        trace.append((s, float(val)))
        if not res.success:
            warns.append(f"start {s}: {res.message}")
        if best is None or val < best[0]:
            best = (float(val), x)
    for w in warns:
        warnings.warn(w, DescentWarning, stacklevel=2)
    phi = Field(grid, prob.embed(best[1]))
    return CapacityEstimate(best[0], "variational", grid.to_dict(), trace, None, warns, extra={"phi": phi})


_METHODS = {"balayage": cap_balayage, "balayage-mass": cap_balayage, "energy": cap_energy, "variational": cap_variational}


def capacity(K: PointSet, grid: GridSpec, params: SolverParams | None = None, method: str = "balayage", **kw):
    try:
        fn = _METHODS[method]
    except KeyError:
        raise ValueError(f"unknown capacity method {method!r}") from None
    return fn(K, grid, params, **kw)


def cached_capacity(K: PointSet, grid: GridSpec, params: SolverParams | None = None, method: str = "balayage", cache=None, **kw) -> dict:
    """``capacity(...).to_dict()`` memoized on the content hash of (set, grid, params, method)."""
    params = params or SolverParams()
    method = "balayage" if method == "balayage-mass" else method

    def compute():
        return capacity(K, grid, params, method, **kw).to_dict()

    if cache is None:
        return compute()
    from .cache import set_key

    key = set_key(f"cap-{method}", K.mask(), grid.to_dict(), params.to_dict(), **kw)
    return cache.get_or_compute(key, compute)


def _radii(start: int, stop: int):
    r = max(start, stop)
    out = []
    while r > stop:
        out.append(r)
        r //= 2
    out.append(stop)
    return out


def inner_cap(E: PointSet, grid: GridSpec, params: SolverParams | None = None, method="balayage", start: int = 4):
    """Supremum over erosions of ``E`` with radii ``start, start/2, ..., 1, 0`` cells."""
    trace = []
    best = 0.0
    for r in _radii(start, 0):
        Kr = E.erode(r) if r else E
        val = capacity(Kr, grid, params, method).value if len(Kr) else 0.0
        trace.append((r, val))
        best = max(best, val)
    return CapacityEstimate(best, f"inner-{method}", grid.to_dict(), trace)


def outer_cap(E: PointSet, grid: GridSpec, params: SolverParams | None = None, method="balayage", start: int = 4):
    """Infimum over dilations of ``E`` with radii ``start, start/2, ..., 1`` cells."""
    trace = []
    best = math.inf
    for r in _radii(start, 1):
        U = E.dilate(r)
        if len(U) and U.margin() < 2:
            raise MarginError(f"dilation by {r} cells escapes the domain margin")
        val = capacity(U, grid, params, method).value
        trace.append((r, val))
        best = min(best, val)
    return CapacityEstimate(0.0 if not len(E) else best, f"outer-{method}", grid.to_dict(), trace)


def capacitability_gap(E: PointSet, grid: GridSpec, params: SolverParams | None = None, start: int = 4) -> float:
    if not len(E):
        return 0.0
    return outer_cap(E, grid, params, "balayage", start).value - cap_balayage(E, grid, params).value


@dataclass
class LevelSetRow:
    lam: float
    lhs: float
    factor: float
    constant: float
    cells: int
    skipped: str = ""


def level_set_capacity_check(u: Field, K: PointSet, lambdas, params: SolverParams | None = None):
    """Empirical constants ``cap({u > lam} & K) / (mu_{R^u_K} (lam^(1-p) + lam^(-1/(p-1))))``.

    Returns ``(rows, max_constant, riesz_mass)``.
    """
    g = u.grid
    p = g.pf
    mass = reduite(u, K, g, params).mass
    rows = []
    Km = K.mask()
    for lam in lambdas:
        S = PointSet.from_mask(Km & (u.values > lam))
        factor = mass * (lam ** (1 - p) + lam ** (-1.0 / (p - 1)))
        if not len(S):
            rows.append(LevelSetRow(float(lam), 0.0, factor, 0.0, 0))
            continue
        if S.margin() < 2:
            warnings.warn(f"level set at lambda={lam} touches the margin; skipped", stacklevel=2)
            rows.append(LevelSetRow(float(lam), math.nan, factor, math.nan, len(S), "margin"))
            continue
        lhs = cap_balayage(S, g, params).value
        rows.append(LevelSetRow(float(lam), lhs, factor, lhs / factor if factor > 0 else math.inf, len(S)))
    consts = [r.constant for r in rows if not r.skipped]
    return rows, (max(consts) if consts else 0.0), mass
