"""Discrete degenerate p-parabolic operator and its solvers.

Space is discretized with piecewise linear elements on the lattice (intervals
in 1D, each square split into two right triangles in 2D) with a lumped mass,
time with backward Euler.  For ``p = 2`` this reduces to the standard
3-point / 5-point Laplacian.  Every implicit step is the minimization of the
strictly convex functional

    F(u) = 1/2 |u - u_prev|^2 + (tau / h^n) J(u) - tau <f, u>,
    J(u) = sum_T |T| / p * (|grad u_T|^2 + eps^2)^(p/2),

so Newton with Armijo backtracking on ``F`` is globally convergent, and the
obstacle version (``u >= psi``) is a bound-constrained convex problem.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import spsolve
from scipy.special import beta as beta_fn

from .ptgrid import GridSpec, PointSet, SpaceTimePoint, rasterize

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when Newton (or the active-set iteration) fails to converge."""

    def __init__(self, message, step=None, residual=None, trace=None):
        super().__init__(message)
        self.step = step
        self.residual = residual
        self.trace = trace or []


@dataclass(frozen=True)
class SolverParams:
    eps: Optional[float] = None  # gradient regularization; None means eps = h
    newton_tol: float = 1e-10  # max-norm of the step residual, in u units
    max_iter: int = 50
    damping: float = 0.5
    M_cap: float = 1e6

    def __post_init__(self):
        if self.eps is not None and self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if not 0 < self.damping < 1:
            raise ValueError("damping must lie in (0, 1)")

    def eps_for(self, grid: GridSpec) -> float:
        return grid.h if self.eps is None else float(self.eps)

    @property
    def contact_tol(self) -> float:
        return 10 * self.newton_tol

    def to_dict(self):
        return {
            "eps": self.eps,
            "newton_tol": self.newton_tol,
            "max_iter": self.max_iter,
            "damping": self.damping,
            "M_cap": self.M_cap,
        }


@dataclass(frozen=True, eq=False)
class Field:
    """Scalar values on every node of a lattice, time first."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)
    truncated: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.truncated is not None:
            t = np.array(self.truncated, dtype=bool)
            t.setflags(write=False)
            object.__setattr__(self, "truncated", t)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def sample(cls, grid, fn: Callable):
        """Sample ``fn(t, x[, y])`` on the node array."""
        return cls(grid, np.broadcast_to(fn(*grid.coords()), grid.shape))

    def __add__(self, other):
        _same_grid(self.grid, other.grid)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other):
        _same_grid(self.grid, other.grid)
        return Field(self.grid, self.values - other.values)

    def __mul__(self, c):
        return Field(self.grid, self.values * c)

    __rmul__ = __mul__

    def max(self):
        return float(self.values.max())

    def min(self):
        return float(self.values.min())


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Nonnegative mass per cell (weights indexed like the node array)."""

    grid: GridSpec
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != self.grid.shape:
            raise ValueError("measure shape does not match grid")
        if (w < 0).any():
            raise ValueError("measure weights must be nonnegative")
        if not np.isfinite(w).all():
            raise ValueError("measure weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def dirac(cls, grid, point: SpaceTimePoint, mass: float):
        """Mass placed on the single cell whose center is nearest to ``point``."""
        j = int(round(point.t / grid.tau))
        idx = tuple(int(round(x / grid.h)) for x in point.x)
        w = np.zeros(grid.shape)
        w[(j,) + idx] = mass
        return cls(grid, w)

    @classmethod
    def uniform_on(cls, S: PointSet, grid, mass: float):
        w = np.zeros(grid.shape)
        if len(S):
            w[tuple(S.cells.T)] = mass / len(S)
        return cls(grid, w)

    @property
    def mass(self) -> float:
        return float(math.fsum(self.weights.ravel()))

    def density(self) -> np.ndarray:
        return self.weights / self.grid.cell_volume

    def restrict(self, S: PointSet) -> "DiscreteMeasure":
        return DiscreteMeasure(self.grid, self.weights * S.mask())

    def support(self, tol=0.0) -> PointSet:
        return PointSet.from_mask(self.weights > tol)

    def __mul__(self, c):
        return DiscreteMeasure(self.grid, self.weights * c)

    __rmul__ = __mul__


def _same_grid(a: GridSpec, b: GridSpec):
    if a != b:
        raise ValueError("mismatched grids")


# ------------------------------------------------------------ the operator


def _flux_coefficient(s, p):
    """``(s)^((p-2)/2)`` with ``s = |g|^2 + eps^2``, safe at ``s = 0``."""
    if p == 2:
        return np.ones_like(s)
    return np.power(s, 0.5 * (p - 2))


def _stiffness_coefficient(g2, eps2, p):
    """Second derivative weight ``(s)^((p-4)/2) ((p-1) g^2 + eps^2)`` of the 1D flux."""
    s = g2 + eps2
    if p == 2:
        return np.ones_like(s)
    out = np.zeros_like(s)
    nz = s > 0
    out[nz] = np.power(s[nz], 0.5 * (p - 4)) * ((p - 1) * g2[nz] + eps2)
    return out


class PLaplacian:
    """Element-wise p-Dirichlet energy on one spatial slice and its derivatives.

    All node arrays are full spatial slices (boundary included); derivatives
    are returned on the full slice, Hessians on interior nodes only.
    """

    def __init__(self, grid: GridSpec, eps: float, p: float | None = None):
        self.grid = grid
        self.n = grid.n
        self.h = grid.h
        self.p = float(grid.p if p is None else p)
        self.eps2 = float(eps) ** 2
        shp = grid.spatial_shape
        self.shape = shp
        self.size = int(np.prod(shp))
        self.interior = grid.interior_mask().ravel()
        self.interior_idx = np.flatnonzero(self.interior)
        if self.n == 2:
            self._build_triangles()

    # ---- 2D triangles
    def _build_triangles(self):
        nx, ny = self.shape
        idx = np.arange(nx * ny).reshape(nx, ny)
        a = idx[:-1, :-1].ravel()
        b = idx[1:, :-1].ravel()
        c = idx[:-1, 1:].ravel()
        d = idx[1:, 1:].ravel()
        # lower triangle (a, b, c): grad = (u_b - u_a, u_c - u_a) / h
        # upper triangle (d, c, b): grad = (u_d - u_c, u_d - u_b) / h
        self.tri_nodes = np.concatenate([np.stack([a, b, c], 1), np.stack([d, c, b], 1)])
        lower = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        upper = np.array([[1.0, -1.0, 0.0], [1.0, 0.0, -1.0]])
        ne = len(a)
        self.tri_D = np.concatenate([np.broadcast_to(lower, (ne, 2, 3)), np.broadcast_to(upper, (ne, 2, 3))])
        self.tri_area = 0.5 * self.h**2
        rows = np.repeat(self.tri_nodes, 3, axis=1).ravel()
        cols = np.tile(self.tri_nodes, (1, 3)).ravel()
        keep = self.interior[rows] & self.interior[cols]
        remap = -np.ones(self.size, dtype=np.int64)
        remap[self.interior_idx] = np.arange(len(self.interior_idx))
        self._hkeep = keep
        self._hrows = remap[rows[keep]]
        self._hcols = remap[cols[keep]]

    def gradients(self, u: np.ndarray) -> np.ndarray:
        """Element gradients: shape ``(E,)`` in 1D, ``(E, 2)`` in 2D."""
        if self.n == 1:
            return np.diff(u) / self.h
        uf = u.reshape(-1)
        return np.einsum("eij,ej->ei", self.tri_D, uf[self.tri_nodes]) / self.h

    def element_volume(self):
        return self.h if self.n == 1 else self.tri_area

    def energy(self, u: np.ndarray, eps2: float | None = None) -> float:
        """``J(u) = sum_T |T|/p (|g|^2 + eps^2)^(p/2)``."""
        e2 = self.eps2 if eps2 is None else eps2
        g = self.gradients(u)
        g2 = g * g if self.n == 1 else (g * g).sum(-1)
        return float(self.element_volume() / self.p * np.power(g2 + e2, 0.5 * self.p).sum())

    def grad_power_integral(self, u: np.ndarray) -> float:
        """``sum_T |T| |grad u_T|^p`` (no regularization)."""
        g = self.gradients(u)
        g2 = g * g if self.n == 1 else (g * g).sum(-1)
        return float(self.element_volume() * np.power(g2, 0.5 * self.p).sum())

    def gradient(self, u: np.ndarray, eps2: float | None = None) -> np.ndarray:
        """``dJ/du`` on every node of the slice (same shape as ``u``)."""
        e2 = self.eps2 if eps2 is None else eps2
        g = self.gradients(u)
        if self.n == 1:
            flux = _flux_coefficient(g * g + e2, self.p) * g
            out = np.zeros_like(u, dtype=float)
            out[:-1] -= flux
            out[1:] += flux
            return out
        g2 = (g * g).sum(-1)
        flux = _flux_coefficient(g2 + e2, self.p)[:, None] * g
        contrib = self.tri_area / self.h * np.einsum("eij,ei->ej", self.tri_D, flux)
        out = np.bincount(self.tri_nodes.ravel(), weights=contrib.ravel(), minlength=self.size)
        return out.reshape(self.shape)

    def hessian(self, u: np.ndarray, eps2: float | None = None, floor: float = 0.0):
        """Interior Hessian of ``J``.

        1D: tridiagonal ``(diag, off)`` with ``off[i]`` coupling interior nodes
        ``i`` and ``i+1``.  2D: CSR matrix.  ``floor`` lower-bounds the
        gradient magnitude used in the coefficients (Newton safeguard only).
        """
        e2 = self.eps2 if eps2 is None else eps2
        g = self.gradients(u)
        if self.n == 1:
            g2 = np.maximum(g * g, floor * floor)
            b = _stiffness_coefficient(g2, e2, self.p) / self.h
            diag = b[:-1] + b[1:]
            off = -b[1:-1]
            return diag, off
        g2 = np.maximum((g * g).sum(-1), floor * floor)
        s = g2 + e2
        a = _flux_coefficient(s, self.p)
        if self.p == 2:
            c = np.zeros_like(s)
        else:
            c = np.zeros_like(s)
            nz = s > 0
            c[nz] = (self.p - 2) * np.power(s[nz], 0.5 * (self.p - 4))
        K = a[:, None, None] * np.eye(2)[None] + c[:, None, None] * np.einsum("ei,ej->eij", g, g)
        local = self.tri_area / self.h**2 * np.einsum("eki,ekl,elj->eij", self.tri_D, K, self.tri_D)
        vals = local.reshape(-1)[self._hkeep]
        m = len(self.interior_idx)
        return sp.csr_matrix((vals, (self._hrows, self._hcols)), shape=(m, m))


def _pin_rows_1d(diag, off, pinned):
    """Replace pinned rows of a symmetric tridiagonal by identity rows (banded form)."""
    m = len(diag)
    ab = np.zeros((3, m))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    if pinned is not None and pinned.any():
        ab[1, pinned] = 1.0
        pi = np.flatnonzero(pinned)
        up = pi[pi < m - 1]
        ab[0, up + 1] = 0.0
        lo = pi[pi > 0]
        ab[2, lo - 1] = 0.0
    return ab


class StepSolver:
    """Solves one backward Euler step, with an optional obstacle and pinned nodes."""

    def __init__(self, grid: GridSpec, params: SolverParams, eps: float | None = None):
        self.grid = grid
        self.params = params
        self.eps = params.eps_for(grid) if eps is None else eps
        self.op = PLaplacian(grid, self.eps)
        self.scale = grid.tau / grid.h**grid.n
        self.inner = self.op.interior.reshape(grid.spatial_shape)

    # F and its gradient on the interior, ``u`` a full slice
    def residual(self, u, u_prev, f):
        g = self.op.gradient(u)
        return (u - u_prev + self.scale * g - self.grid.tau * f)[self.inner]

    def objective(self, u, u_prev, f):
        d = (u - u_prev)[self.inner]
        return 0.5 * float(d @ d) + self.scale * self.op.energy(u) - self.grid.tau * float((f * u)[self.inner].sum())

    def _solve_linear(self, u, rhs, pinned):
        if self.grid.n == 1:
            diag, off = self.op.hessian(u)
            ab = _pin_rows_1d(1.0 + self.scale * diag, self.scale * off, pinned)
            return solve_banded((1, 1), ab, rhs, check_finite=False)
        H = self.op.hessian(u)
        m = H.shape[0]
        A = sp.identity(m, format="csr") + self.scale * H
        if pinned is not None and pinned.any():
            keep = sp.diags((~pinned).astype(float))
            A = (keep @ A + sp.diags(pinned.astype(float))).tocsc()
        return spsolve(A.tocsc(), rhs)

    def solve(self, u_prev, f=None, boundary=None, psi=None, pinned=None, pinned_values=None, step=None):
        """Return ``(u, phi, iterations)`` with ``phi`` the interior step residual.

        ``u_prev``, ``f``, ``boundary``, ``psi`` and ``pinned_values`` are full
        spatial slices; ``pinned`` is a boolean full-slice mask of nodes held
        at ``pinned_values``.
        """
        prm = self.params
        shp = self.grid.spatial_shape
        f = np.zeros(shp) if f is None else f
        u = np.array(u_prev, dtype=float, copy=True)
        if boundary is not None:
            u[~self.inner] = boundary[~self.inner]
        else:
            u[~self.inner] = 0.0
        pin_in = None
        if pinned is not None and pinned.any():
            u[pinned] = pinned_values[pinned]
            pin_in = pinned[self.inner]
        lower = None
        if psi is not None:
            lower = psi[self.inner]
            ui = u[self.inner]
            free = ~pin_in if pin_in is not None else slice(None)
            ui[free] = np.maximum(ui[free], lower[free])
            u[self.inner] = ui
            if pin_in is not None:
                lower = np.where(pin_in, -np.inf, lower)

        trace = []
        for it in range(prm.max_iter + 1):
            phi = self.residual(u, u_prev, f)
            if pin_in is not None:
                phi_eff = np.where(pin_in, 0.0, phi)
            else:
                phi_eff = phi
            if lower is None:
                kkt = float(np.abs(phi_eff).max()) if phi_eff.size else 0.0
            else:
                gap = u[self.inner] - lower
                kkt = float(np.abs(np.minimum(phi_eff, gap)).max()) if phi_eff.size else 0.0
            trace.append(kkt)
            if kkt <= prm.newton_tol:
                return u, phi, it
            if it == prm.max_iter:
                break
            if lower is None:
                d = self._solve_linear(u, -phi_eff, pin_in)
                if pin_in is not None:
                    d[pin_in] = 0.0
            else:
                d = self._active_set_step(u, phi_eff, lower, pin_in, trace)
            u = self._line_search(u, d, u_prev, f, phi_eff, lower)
        raise SolverError(
            f"Newton did not converge at step {step}: residual {trace[-1]:.3e}",
            step=step,
            residual=trace[-1],
            trace=trace,
        )

    def _active_set_step(self, u, phi, lower, pin_in, trace, max_sweeps=60):
        """Semismooth Newton (primal-dual active set) on the linearized complementarity problem.

        Finds ``d >= lower - u`` with ``A d + phi >= 0`` and complementarity,
        ``A`` the step Jacobian.  Pinned nodes have ``lower = -inf`` and ``d = 0``.
        """
        ui = u[self.inner]
        c = lower - ui
        pinned = np.zeros(len(c), dtype=bool) if pin_in is None else pin_in
        active = (~pinned) & (c > -phi)  # min(phi, u - psi) picks the constraint
        if self.grid.n == 1:
            diag, off = self.op.hessian(u)
            diag = 1.0 + self.scale * diag
            off = self.scale * off

            def matvec(v):
                out = diag * v
                out[:-1] += off * v[1:]
                out[1:] += off * v[:-1]
                return out

        else:
            A = sp.identity(len(c), format="csr") + self.scale * self.op.hessian(u)
            matvec = A.dot
        seen = set()
        d = np.zeros_like(c)
        for _ in range(max_sweeps):
            fixed = active | pinned
            rhs = np.where(fixed, np.where(pinned, 0.0, c), -phi)
            if self.grid.n == 1:
                ab = _pin_rows_1d(diag, off, fixed)
                d = solve_banded((1, 1), ab, rhs, check_finite=False)
            else:
                keep = sp.diags((~fixed).astype(float))
                M = (keep @ A + sp.diags(fixed.astype(float))).tocsc()
                d = spsolve(M, rhs)
            lam = matvec(d) + phi
            lam[~active] = 0.0
            new_active = (~pinned) & (lam + (c - d) > 0)
            key = new_active.tobytes()
            if np.array_equal(new_active, active) or key in seen:
                break
            seen.add(key)
            active = new_active
        return np.maximum(d, np.where(pinned, 0.0, c))

    def _line_search(self, u, d, u_prev, f, phi, lower):
        prm = self.params
        F0 = self.objective(u, u_prev, f)
        slope = float(phi @ d)
        r0 = float(np.abs(phi).max())
        alpha = 1.0
        inner = self.inner
        while True:
            trial = u.copy()
            trial[inner] = u[inner] + alpha * d
            if lower is not None:
                trial[inner] = np.maximum(trial[inner], np.where(np.isfinite(lower), lower, -np.inf))
            F1 = self.objective(trial, u_prev, f)
            if F1 <= F0 + 1e-4 * alpha * min(slope, 0.0) + 1e-13 * max(1.0, abs(F0)):
                return trial
            r1 = float(np.abs(self.residual(trial, u_prev, f)).max())
            if lower is None and r1 < (1 - 1e-4 * alpha) * r0:
                return trial
            alpha *= prm.damping
            if alpha < 1e-10:
                return trial


# ------------------------------------------------------------ public ops


def apply_operator(u: Field, params: SolverParams | None = None, eps: float | None = None) -> Field:
    """Residual density ``D_t^- u - div_h((|grad u|^2 + eps^2)^((p-2)/2) grad u)``.

    Defined on interior nodes of levels ``1..M``; zero on the parabolic
    boundary.  ``u``'s own boundary values are used as Dirichlet data.
    """
    grid = u.grid
    params = params or SolverParams()
    e = params.eps_for(grid) if eps is None else eps
    op = PLaplacian(grid, e)
    inner = grid.interior_mask()
    out = np.zeros(grid.shape)
    v = u.values
    m = grid.h**grid.n
    for j in range(1, grid.levels + 1):
        r = (v[j] - v[j - 1]) / grid.tau + op.gradient(v[j]) / m
        out[j][inner] = r[inner]
    return Field(grid, out)


def boundary_outflow(u_slice: np.ndarray, grid: GridSpec, eps: float = 0.0) -> float:
    """Discrete flux leaving the domain through the lateral boundary at one level.

    Summing the step residual over interior nodes gives
    ``h^n sum (u_j - u_{j-1}) = -tau * outflow + tau h^n sum f``.
    """
    op = PLaplacian(grid, eps)
    g = op.gradient(u_slice)
    return float(g[grid.interior_mask()].sum())


def solve_forward(
    grid: GridSpec,
    rhs: DiscreteMeasure | None = None,
    params: SolverParams | None = None,
    initial: np.ndarray | None = None,
    boundary: Callable | np.ndarray | None = None,
    pinned: PointSet | None = None,
    pinned_values: np.ndarray | None = None,
) -> Field:
    """Backward Euler solve of ``u_t - Delta_p u = rhs`` with Dirichlet data.

    ``boundary`` (full node array or callable ``(t, x...)``) overrides the
    zero lateral data; ``initial`` overrides the zero initial slice.  Nodes in
    ``pinned`` are held at ``pinned_values`` (interior Dirichlet data).
    Values whose magnitude exceeds ``M_cap`` are clipped and flagged.
    """
    params = params or SolverParams()
    if rhs is not None:
        _same_grid(grid, rhs.grid)
    bvals = _boundary_array(grid, boundary)
    solver = StepSolver(grid, params)
    vals = np.zeros(grid.shape)
    if initial is not None:
        vals[0] = initial
    elif bvals is not None:
        vals[0] = bvals[0]
    dens = None if rhs is None else rhs.density()
    pmask = None if pinned is None else pinned.mask()
    for j in range(1, grid.levels + 1):
        f = None if dens is None else dens[j]
        b = None if bvals is None else bvals[j]
        pj = None
        if pmask is not None and pmask[j].any():
            pj = pmask[j]
        if f is None and b is None and pj is None and not vals[j - 1].any():
            continue
        u, _, _ = solver.solve(
            vals[j - 1],
            f=f,
            boundary=b,
            pinned=pj,
            pinned_values=None if pj is None else pinned_values[j],
            step=j,
        )
        vals[j] = u
    return _capped(grid, vals, params.M_cap)


def _capped(grid, vals, M_cap):
    over = np.abs(vals) > M_cap
    if over.any():
        vals = np.clip(vals, -M_cap, M_cap)
        return Field(grid, vals, truncated=over)
    return Field(grid, vals)


def _boundary_array(grid, boundary):
    if boundary is None:
        return None
    if callable(boundary):
        return np.broadcast_to(boundary(*grid.coords()), grid.shape).astype(float)
    arr = np.asarray(boundary, dtype=float)
    if arr.shape != grid.shape:
        raise ValueError("boundary array must match the grid")
    return arr


# ------------------------------------------------------------ Barenblatt


def barenblatt_constants(p: float, n: int, mass: float):
    """Exponents and profile constants of the source-type solution.

    ``u = t^-alpha (C - kappa |x t^-beta|^(p/(p-1)))_+^((p-1)/(p-2))``.
    """
    p = float(p)
    if p <= 2:
        raise ValueError("Barenblatt profile needs p > 2")
    beta = 1.0 / (n * (p - 2) + p)
    alpha = n * beta
    gamma = p / (p - 1)
    m = (p - 1) / (p - 2)
    kappa = (p - 2) / p * beta ** (1.0 / (p - 1))
    sphere = 2.0 if n == 1 else 2.0 * math.pi
    radial = beta_fn(n / gamma, m + 1) / gamma
    # mass = C^(m + n/gamma) kappa^(-n/gamma) * sphere * radial
    C = (mass * kappa ** (n / gamma) / (sphere * radial)) ** (1.0 / (m + n / gamma))
    return {"alpha": alpha, "beta": beta, "gamma": gamma, "m": m, "kappa": kappa, "C": C}


def barenblatt(point: SpaceTimePoint | None = None, p=3, n=1, mass=1.0, *, x=None, t=None):
    """Source-type solution of ``u_t = Delta_p u`` with total mass ``mass``, centered at the origin.

    Accepts a :class:`SpaceTimePoint` or array arguments ``x`` (last axis
    spatial when ``n = 2``) and ``t``.
    """
    if point is not None:
        x = np.asarray(point.x, dtype=float)
        t = point.t
        scalar = True
    else:
        x = np.asarray(x, dtype=float)
        scalar = False
    t = np.asarray(t, dtype=float)
    if (t <= 0).any():
        raise ValueError("Barenblatt profile is defined for t > 0 only")
    c = barenblatt_constants(p, n, mass)
    if n == 1 and (scalar or x.ndim == 0 or x.shape[-1:] != (1,)):
        r = np.abs(x) if not scalar else abs(float(x[0]))
    else:
        r = np.sqrt((x * x).sum(-1))
    xi = r * t ** (-c["beta"])
    core = np.maximum(c["C"] - c["kappa"] * xi ** c["gamma"], 0.0)
    val = t ** (-c["alpha"]) * core ** c["m"]
    return float(val) if scalar else val


def barenblatt_radius(t, p=3, n=1, mass=1.0):
    c = barenblatt_constants(p, n, mass)
    return (c["C"] / c["kappa"]) ** (1.0 / c["gamma"]) * t ** c["beta"]


# ------------------------------------------------------- regularization


def _neighbor_stack(v: np.ndarray, exclude_center=True, fill=np.inf):
    """All 3^(d) - 1 shifted copies of ``v`` (edge-padded with ``fill``)."""
    d = v.ndim
    padded = np.pad(v, 1, mode="constant", constant_values=fill)
    out = []
    import itertools

    for off in itertools.product((-1, 0, 1), repeat=d):
        if exclude_center and not any(off):
            continue
        sl = tuple(slice(1 + o, 1 + o + s) for o, s in zip(off, v.shape))
        out.append(padded[sl])
    return np.stack(out)


def lsc_regularize(u: Field, jump_tol: float | None = None, max_sweeps: int = 10_000) -> Field:
    """Lower semicontinuous regularization on the lattice.

    A node whose value exceeds every neighbor by more than ``jump_tol``
    (default 5% of the field's range) is an upward jump that a lower
    semicontinuous function cannot have; it is replaced by the minimum over
    its space-time neighborhood.  Sweeps repeat until nothing changes, so
    the map is idempotent.  Smooth sampled fields are left untouched.
    """
    v = np.array(u.values, dtype=float, copy=True)
    rng = float(v.max() - v.min()) if v.size else 0.0
    tol = 0.05 * rng if jump_tol is None else jump_tol
    for _ in range(max_sweeps):
        nb_lo = _neighbor_stack(v, fill=np.inf)
        nb_hi = _neighbor_stack(v, fill=-np.inf)
        upper = nb_hi.max(axis=0)
        raised = v > upper + tol
        if not raised.any():
            break
        v[raised] = nb_lo.min(axis=0)[raised]
    return Field(u.grid, v, truncated=u.truncated)


def lsc_extend(u: Field, K: PointSet) -> Field:
    """Redefine ``u`` on ``K`` as the lower limit from outside ``K``.

    Each node of ``K`` gets the minimum of ``u`` over its nearest ring of
    neighbors lying outside ``K`` (rings grow until one is found).
    """
    v = np.array(u.values, dtype=float, copy=True)
    if not len(K):
        return Field(u.grid, v)
    remaining = K.mask().copy()
    while remaining.any():
        known = np.where(remaining, np.inf, v)
        nb = _neighbor_stack(known, fill=np.inf).min(axis=0)
        hit = remaining & np.isfinite(nb)
        if not hit.any():
            raise ValueError("K covers the whole lattice")
        v[hit] = nb[hit]
        remaining &= ~hit
    return Field(u.grid, v)


# --------------------------------------------------- integrability classes


@dataclass
class IntegrabilityReport:
    q: float  # math.inf when every tested norm stays bounded
    verdict: str  # "B" or "M-suspect"
    threshold: float
    exponents: list
    growth: list  # log2 norm ratio per refinement, one entry per exponent
    heuristic: bool = True
    note: str = "lattice illustration; class membership is not decidable at finite resolution"


def _lq_power(field: Field, region_mask, q):
    g = field.grid
    v = np.abs(field.values[region_mask])
    return float(np.sum(v**q) * g.cell_volume)


def _coarsen(u: Field) -> Field:
    g = u.grid
    cells = g.cells
    if g.levels % 2 or any(c % 2 for c in cells):
        raise ValueError("field cannot be coarsened by 2")
    cg = GridSpec(g.n, g.extents, 2 * g.h, 2 * g.tau, g.T, g.p)
    sl = (slice(None, None, 2),) * (g.n + 1)
    return Field(cg, u.values[sl])


def estimate_integrability_exponent(
    fields,
    region,
    p=None,
    n=None,
    delta0: float = 0.1,
    exponents=None,
    growth_tol: float = 0.25,
) -> IntegrabilityReport:
    """Largest ``q`` for which the lattice ``L^q`` norm stays bounded under refinement.

    ``fields`` is a list of fields on successively refined grids (a single
    field is compared with its own 2x subsample).  ``region`` is a shape, or a
    PointSet on the finest grid.  For every exponent the growth rate
    ``log2(||u||_q^q fine / coarse)`` is measured; where it exceeds
    ``growth_tol`` the norm is counted as unbounded, a line is fitted to the
    growth rates there and its zero crossing is the estimate.
    """
    if isinstance(fields, Field):
        fields = [_coarsen(fields), fields]
    if len(fields) < 2:
        raise ValueError("need at least two refinement levels")
    grid = fields[-1].grid
    p = float(grid.p if p is None else p)
    n = grid.n if n is None else n
    masks = []
    for fl in fields:
        if isinstance(region, PointSet):
            if region.shape != fl.grid.shape:
                m = _transfer_mask(region, grid, fl.grid)
            else:
                m = region.mask()
        else:
            m = rasterize(region, fl.grid).mask()
        masks.append(m)
    if not any(m.any() for m in masks):
        raise ValueError("empty region")
    if exponents is None:
        exponents = np.round(np.arange(0.5, 24.01, 0.25), 6)
    exponents = np.asarray(exponents, dtype=float)
    growth = []
    for q in exponents:
        vals = [_lq_power(fl, m, q) for fl, m in zip(fields, masks)]
        g = []
        for a, b in zip(vals[:-1], vals[1:]):
            if a <= 0 and b <= 0:
                g.append(0.0)
            elif a <= 0:
                g.append(np.inf)
            else:
                g.append(math.log2(b / a))
        growth.append(float(g[-1]))
    growth = np.asarray(growth)
    bad = growth > growth_tol
    if not bad.any():
        q_hat = math.inf
    else:
        qs = exponents[bad]
        gs = growth[bad]
        finite = np.isfinite(gs)
        if finite.sum() >= 2:
            slope, icpt = np.polyfit(qs[finite], gs[finite], 1)
            q_hat = float(-icpt / slope) if slope > 0 else float(qs.min())
            q_hat = min(q_hat, float(qs.min()))
        else:
            q_hat = float(qs.min())
        first_bad = float(exponents[np.argmax(bad)])
        # the linear fit can only move the estimate below the first divergent exponent
        q_hat = max(min(q_hat, first_bad), float(exponents[0]) if first_bad > exponents[0] else 0.0)
    thr = p - 2 + delta0
    verdict = "B" if q_hat >= thr else "M-suspect"
    return IntegrabilityReport(q_hat, verdict, thr, exponents.tolist(), growth.tolist())


def _transfer_mask(S: PointSet, src: GridSpec, dst: GridSpec):
    pts = S.centers(src)
    m = np.zeros(dst.shape, dtype=bool)
    j = np.clip(np.round(pts[:, 0] / dst.tau).astype(int), 0, dst.levels)
    idx = [np.clip(np.round(pts[:, 1 + a] / dst.h).astype(int), 0, dst.cells[a]) for a in range(dst.n)]
    m[(j, *idx)] = True
    return m
