"""Space-time lattice, the parabolic metric, set shapes and the dyadic
parabolic rectangle hierarchy.

Lattice conventions
-------------------
Spatial nodes sit at ``x_i = i*h`` for ``i = 0..N`` on every axis, time levels
at ``t_j = j*tau`` for ``j = 0..M``.  Node ``(j, i...)`` owns the cell
``[x_i - h/2, x_i + h/2]^n x [t_j - tau/2, t_j + tau/2]`` and the node is the
cell's center.  Arrays are indexed time first: ``values[j, i]`` in 1D and
``values[j, i, k]`` in 2D.  Boundary nodes and level 0 form the parabolic
boundary; point sets only ever contain interior cells.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

_REL = 1e-12


def as_rational_p(p) -> Fraction:
    """Parse ``p`` given as int, float, Fraction or a "k/l" string."""
    if isinstance(p, Fraction):
        return p
    if isinstance(p, str):
        return Fraction(p.strip())
    if isinstance(p, int):
        return Fraction(p)
    frac = Fraction(p).limit_denominator(3)
    if abs(float(frac) - float(p)) > 1e-12:
        raise ValueError("p must be rational k/l")
    return frac


def _as_int_ratio(a: float, b: float, what: str) -> int:
    q = a / b
    k = int(round(q))
    if k < 1 or abs(q - k) > 1e-9 * max(1.0, q):
        raise ValueError(f"{what}: {a} / {b} must be a positive integer")
    return k


@dataclass(frozen=True)
class GridSpec:
    """Uniform lattice on ``Omega x (0, T)`` with ``Omega`` a box at the origin."""

    n: int
    extents: tuple
    h: float
    tau: float
    T: float
    p: Fraction = Fraction(3)

    def __post_init__(self):
        object.__setattr__(self, "p", as_rational_p(self.p))
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))
        if self.n not in (1, 2):
            raise ValueError("spatial dimension n must be 1 or 2")
        if len(self.extents) != self.n:
            raise ValueError("need one extent per spatial axis")
        if not (self.h > 0 and self.tau > 0 and self.T > 0):
            raise ValueError("h, tau and T must be positive")
        if self.p < 2:
            raise ValueError("p must be at least 2")
        for e in self.extents:
            _as_int_ratio(e, self.h, "extent/h")
        _as_int_ratio(self.T, self.tau, "T/tau")

    @classmethod
    def uniform(cls, n=1, cells=64, levels=256, extent=1.0, T=1.0, p=3):
        """Grid with ``cells`` spatial cells per axis and ``levels`` time steps."""
        return cls(n=n, extents=(extent,) * n, h=extent / cells, tau=T / levels, T=T, p=p)

    @property
    def k(self) -> int:
        return self.p.numerator

    @property
    def l(self) -> int:
        return self.p.denominator

    @property
    def pf(self) -> float:
        return float(self.p)

    @property
    def cells(self) -> tuple:
        return tuple(int(round(e / self.h)) for e in self.extents)

    @property
    def levels(self) -> int:
        return int(round(self.T / self.tau))

    @property
    def shape(self) -> tuple:
        """Node array shape, time first."""
        return (self.levels + 1,) + tuple(c + 1 for c in self.cells)

    @property
    def spatial_shape(self) -> tuple:
        return self.shape[1:]

    @property
    def cell_volume(self) -> float:
        return self.h**self.n * self.tau

    def times(self) -> np.ndarray:
        return np.arange(self.levels + 1) * self.tau

    def axis(self, a: int) -> np.ndarray:
        return np.arange(self.cells[a] + 1) * self.h

    def coords(self):
        """Broadcastable coordinate arrays ``(t, x[, y])`` over the node array."""
        t = self.times().reshape((-1,) + (1,) * self.n)
        xs = []
        for a in range(self.n):
            shp = [1] * (self.n + 1)
            shp[a + 1] = -1
            xs.append(self.axis(a).reshape(shp))
        return (t, *xs)

    def spatial_coords(self):
        xs = []
        for a in range(self.n):
            shp = [1] * self.n
            shp[a] = -1
            xs.append(self.axis(a).reshape(shp))
        return xs

    def interior_mask(self) -> np.ndarray:
        """Spatial mask of nodes off the lateral boundary."""
        m = np.zeros(self.spatial_shape, dtype=bool)
        m[(slice(1, -1),) * self.n] = True
        return m

    def refined(self, factor_space=2, factor_time=2) -> "GridSpec":
        return GridSpec(self.n, self.extents, self.h / factor_space, self.tau / factor_time, self.T, self.p)

    def with_T(self, T: float) -> "GridSpec":
        return GridSpec(self.n, self.extents, self.h, self.tau, T, self.p)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "extents": list(self.extents),
            "h": self.h,
            "tau": self.tau,
            "T": self.T,
            "p": str(self.p),
        }

    @classmethod
    def from_dict(cls, d) -> "GridSpec":
        return cls(d["n"], tuple(d["extents"]), d["h"], d["tau"], d["T"], Fraction(d["p"]))


@dataclass(frozen=True)
class SpaceTimePoint:
    x: tuple
    t: float

    def __post_init__(self):
        x = self.x
        if np.isscalar(x):
            x = (x,)
        object.__setattr__(self, "x", tuple(float(v) for v in x))
        object.__setattr__(self, "t", float(self.t))


def d_p(a: SpaceTimePoint, b: SpaceTimePoint, p) -> float:
    """Parabolic distance ``max(|x_a - x_b|, |t_a - t_b|**(1/p))``."""
    pf = float(p)
    dx = math.hypot(*(u - v for u, v in zip(a.x, b.x)))
    return max(dx, abs(a.t - b.t) ** (1.0 / pf))


# ----------------------------------------------------------------- shapes


@dataclass(frozen=True)
class ParabolicCylinder:
    """Closed d_p ball ``Q_r`` or its lower half ``Q_r^-`` (time in ``[t - r^p, t]``)."""

    center: SpaceTimePoint
    r: float
    variant: str = "full"

    def contains(self, t, xs, p, tau=None):
        pf = float(p)
        c = self.center
        d2 = sum((x - cx) ** 2 for x, cx in zip(xs, c.x))
        rs = self.r * (1 + _REL)
        inside = d2 <= rs * rs
        dt = t - c.t
        span = self.r**pf * (1 + _REL)
        if self.variant == "full":
            return inside & (np.abs(dt) <= span)
        if self.variant == "lower":
            return inside & (dt <= 1e-12) & (dt >= -span)
        raise ValueError(f"unknown cylinder variant {self.variant!r}")


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``prod [lo_a, hi_a] x [t0, t1]``."""

    lo: tuple
    hi: tuple
    t0: float
    t1: float

    def contains(self, t, xs, p, tau=None):
        eps = 1e-12
        m = (t >= self.t0 - eps) & (t <= self.t1 + eps)
        for x, a, b in zip(xs, self.lo, self.hi):
            m = m & (x >= a - eps) & (x <= b + eps)
        return m


@dataclass(frozen=True)
class Disc:
    """Spatial ball ``B(center, radius)`` at the single time ``t``.

    Rasterizes to the time level nearest to ``t``.
    """

    center: tuple
    radius: float
    t: float

    def contains(self, t, xs, p, tau=None):
        d2 = sum((x - c) ** 2 for x, c in zip(xs, self.center))
        inside = d2 <= (self.radius * (1 + _REL)) ** 2
        if tau is None:
            return inside & (np.abs(t - self.t) <= 1e-12)
        level = math.floor(self.t / tau + 0.5)
        return inside & (np.abs(t - level * tau) <= 1e-9 * tau)


@dataclass(frozen=True)
class ShapeUnion:
    parts: tuple

    def contains(self, t, xs, p, tau=None):
        m = None
        for part in self.parts:
            mi = part.contains(t, xs, p, tau)
            m = mi if m is None else (m | mi)
        return m


@dataclass(frozen=True)
class ShapeDifference:
    base: object
    cut: object

    def contains(self, t, xs, p, tau=None):
        return self.base.contains(t, xs, p, tau) & ~self.cut.contains(t, xs, p, tau)


Shape = Union[ParabolicCylinder, Box, Disc, ShapeUnion, ShapeDifference]


# --------------------------------------------------------------- point sets


@dataclass(frozen=True, eq=False)
class PointSet:
    """Sorted, duplicate-free interior cells of a lattice.

    ``cells`` has one row per cell: ``(j, i)`` in 1D or ``(j, i, k)`` in 2D.
    """

    shape: tuple
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=np.int64).reshape(-1, len(self.shape))
        if len(c):
            c = np.unique(c, axis=0)
            shp = np.asarray(self.shape)
            if (c < 0).any() or (c >= shp).any():
                raise ValueError("cell index outside the lattice")
        c.setflags(write=False)
        object.__setattr__(self, "cells", c)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @classmethod
    def empty(cls, grid: GridSpec) -> "PointSet":
        return cls(grid.shape, np.zeros((0, grid.n + 1), dtype=np.int64))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "PointSet":
        return cls(mask.shape, np.argwhere(mask))

    def __len__(self):
        return len(self.cells)

    def __bool__(self):
        return len(self.cells) > 0

    def __eq__(self, other):
        return (
            isinstance(other, PointSet)
            and self.shape == other.shape
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.shape, self.cells.tobytes()))

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        if len(self.cells):
            m[tuple(self.cells.T)] = True
        return m

    @property
    def bbox(self):
        if not len(self.cells):
            return None
        return self.cells.min(axis=0), self.cells.max(axis=0)

    def __or__(self, other):
        return PointSet(self.shape, np.vstack([self.cells, other.cells]))

    def __and__(self, other):
        return PointSet.from_mask(self.mask() & other.mask())

    def __sub__(self, other):
        return PointSet.from_mask(self.mask() & ~other.mask())

    def issubset(self, other) -> bool:
        return not (self.mask() & ~other.mask()).any()

    def dilate(self, k: int, time_k: int | None = None) -> "PointSet":
        """Grow by ``k`` cells along every spatial axis and ``time_k`` (default ``k``) in time."""
        from scipy.ndimage import binary_dilation

        if k <= 0 and not time_k:
            return self
        tk = k if time_k is None else time_k
        struct = np.ones((2 * tk + 1,) + (2 * k + 1,) * (len(self.shape) - 1), dtype=bool)
        return PointSet.from_mask(binary_dilation(self.mask(), structure=struct))

    def erode(self, k: int, time_k: int | None = None) -> "PointSet":
        from scipy.ndimage import binary_erosion

        if k <= 0 and not time_k:
            return self
        tk = k if time_k is None else time_k
        struct = np.ones((2 * tk + 1,) + (2 * k + 1,) * (len(self.shape) - 1), dtype=bool)
        return PointSet.from_mask(binary_erosion(self.mask(), structure=struct, border_value=0))

    def margin(self) -> int:
        """Smallest index distance to the parabolic boundary (spatial sides, level 0)."""
        if not len(self.cells):
            return 10**9
        c = self.cells
        m = int(c[:, 0].min())
        for a in range(1, len(self.shape)):
            m = min(m, int(c[:, a].min()), int(self.shape[a] - 1 - c[:, a].max()))
        return m

    def centers(self, grid: GridSpec) -> np.ndarray:
        """Cell centers as rows ``(t, x[, y])``."""
        out = self.cells.astype(float)
        out[:, 0] *= grid.tau
        out[:, 1:] *= grid.h
        return out


def rasterize(shape, grid: GridSpec) -> PointSet:
    """Interior cells whose centers lie in the closed shape."""
    if hasattr(shape, "rasterize"):
        return shape.rasterize(grid)
    t, *xs = grid.coords()
    m = shape.contains(t, xs, grid.p, grid.tau)
    m = np.broadcast_to(m, grid.shape).copy()
    m[0] = False
    inner = grid.interior_mask()
    m &= inner[None]
    return PointSet.from_mask(m)


def p_diam(S, grid: GridSpec | None = None, mode: str = "cells", p=None) -> float:
    """Parabolic diameter.

    ``S`` is a :class:`PointSet` (needs ``grid``) or an array of points with
    rows ``(t, x...)``.  In ``"cells"`` mode every cell contributes its corners,
    so a single cell has a positive diameter; ``"centers"`` uses cell centers
    only.  Raw point arrays always have zero extent.
    """
    if isinstance(S, PointSet):
        if not len(S):
            return 0.0
        pts = S.centers(grid)
        pf = grid.pf
        ext_t, ext_x = (grid.tau, grid.h) if mode == "cells" else (0.0, 0.0)
    else:
        pts = np.atleast_2d(np.asarray(S, dtype=float))
        if not len(pts):
            return 0.0
        pf = float(p if p is not None else grid.p)
        ext_t = ext_x = 0.0
    t = pts[:, 0]
    dt = (t.max() - t.min() + ext_t) ** (1.0 / pf)
    xs = np.unique(pts[:, 1:], axis=0)
    if ext_x:
        offs = np.array(list(itertools.product((-0.5, 0.5), repeat=xs.shape[1]))) * ext_x
        xs = (xs[:, None, :] + offs[None]).reshape(-1, xs.shape[1])
    dx = _point_diameter(xs)
    return float(max(dx, dt))


def _point_diameter(xs: np.ndarray) -> float:
    if len(xs) < 2:
        return 0.0
    if xs.shape[1] == 1:
        return float(xs.max() - xs.min())
    if len(xs) > 64:
        from scipy.spatial import ConvexHull
        from scipy.spatial.qhull import QhullError

        try:
            xs = xs[ConvexHull(xs).vertices]
        except QhullError:
            pass
    from scipy.spatial.distance import pdist

    return float(pdist(xs).max())


# ------------------------------------------------------------ dyadic grid


@dataclass(frozen=True)
class DyadicRoot:
    """Generation-0 parabolic rectangle: spatial side ``r0``, time side ``r0**p``."""

    origin: tuple
    t0: float
    r0: float
    p: Fraction
    n: int

    def __post_init__(self):
        object.__setattr__(self, "p", as_rational_p(self.p))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if self.p.denominator > 3 or self.p.numerator > 9:
            raise ValueError("dyadic grid needs p = k/l with k <= 9, l <= 3")

    @classmethod
    def for_grid(cls, grid: GridSpec) -> "DyadicRoot":
        r0 = max(max(grid.extents), grid.T ** (1.0 / grid.pf))
        return cls((0.0,) * grid.n, 0.0, r0, grid.p, grid.n)

    @property
    def k(self):
        return self.p.numerator

    @property
    def l(self):
        return self.p.denominator

    @property
    def branching(self) -> int:
        return 2 ** (self.n * self.l + self.k)

    def sides(self, gen: int):
        """Spatial and temporal side lengths at generation ``gen``."""
        return self.r0 * 2.0 ** (-gen * self.l), self.r0 ** float(self.p) * 2.0 ** (-gen * self.k)

    def counts(self, gen: int):
        return 2 ** (gen * self.l), 2 ** (gen * self.k)

    def diam(self, gen: int) -> float:
        sx, st = self.sides(gen)
        return max(math.sqrt(self.n) * sx, st ** (1.0 / float(self.p)))

    def rect(self, gen: int, index) -> "DyadicRect":
        return DyadicRect(self, gen, tuple(int(i) for i in index))

    def locate(self, points: np.ndarray, gen: int) -> np.ndarray:
        """Generation-``gen`` index rows ``(ix..., it)`` of points given as rows ``(t, x...)``.

        Rectangles are half-open except on the root's upper faces.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        sx, st = self.sides(gen)
        cx, ct = self.counts(gen)
        out = np.empty((len(pts), self.n + 1), dtype=np.int64)
        tol = 1e-9
        for a in range(self.n):
            u = (pts[:, 1 + a] - self.origin[a]) / sx
            if (u < -tol).any() or (u > cx + tol).any():
                raise ValueError("root too small")
            out[:, a] = np.clip(np.floor(u), 0, cx - 1)
        u = (pts[:, 0] - self.t0) / st
        if (u < -tol).any() or (u > ct + tol).any():
            raise ValueError("root too small")
        out[:, self.n] = np.clip(np.floor(u), 0, ct - 1)
        return out

    def to_dict(self):
        return {"origin": list(self.origin), "t0": self.t0, "r0": self.r0, "p": str(self.p), "n": self.n}


@dataclass(frozen=True)
class DyadicRect:
    root: DyadicRoot
    gen: int
    index: tuple

    @property
    def sides(self):
        return self.root.sides(self.gen)

    @property
    def lower(self):
        sx, st = self.sides
        x = tuple(o + i * sx for o, i in zip(self.root.origin, self.index[:-1]))
        return x, self.root.t0 + self.index[-1] * st

    @property
    def volume(self) -> float:
        sx, st = self.sides
        return sx**self.root.n * st

    def diam(self) -> float:
        return self.root.diam(self.gen)

    def parent(self) -> "DyadicRect":
        if self.gen == 0:
            raise ValueError("root has no parent")
        l, k = self.root.l, self.root.k
        idx = tuple(i >> l for i in self.index[:-1]) + (self.index[-1] >> k,)
        return DyadicRect(self.root, self.gen - 1, idx)


def dyadic_children(R: DyadicRect) -> list:
    """The ``2**(n*l + k)`` generation ``gen+1`` rectangles partitioning ``R``."""
    l, k, n = R.root.l, R.root.k, R.root.n
    spatial = [range(i << l, (i << l) + 2**l) for i in R.index[:-1]]
    temporal = range(R.index[-1] << k, (R.index[-1] << k) + 2**k)
    return [DyadicRect(R.root, R.gen + 1, tuple(s) + (t,)) for s in itertools.product(*spatial) for t in temporal]


def dyadic_cover(S, grid: GridSpec, generation: int, root: DyadicRoot | None = None) -> list:
    """Generation-``generation`` rectangles containing at least one cell center of ``S``."""
    root = root or DyadicRoot.for_grid(grid)
    if isinstance(S, PointSet):
        if not len(S):
            return []
        pts = S.centers(grid)
    else:
        pts = np.atleast_2d(S)
    idx = np.unique(root.locate(pts, generation), axis=0)
    return [DyadicRect(root, generation, tuple(int(v) for v in row)) for row in idx]


def iter_points(ps: Iterable[SpaceTimePoint]) -> np.ndarray:
    return np.array([(q.t, *q.x) for q in ps], dtype=float)


def as_points(S: Sequence) -> np.ndarray:
    return np.atleast_2d(np.asarray(S, dtype=float))
