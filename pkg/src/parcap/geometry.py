"""Parabolic Hausdorff contents, Frostman measures and the Wolff-type potential.

Everything works on the dyadic parabolic hierarchy of a :class:`DyadicRoot`:
a set is represented by the generation-``leaf_gen`` rectangles containing its
cell centers, and coarser rectangles are obtained by shifting indices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .ppde import DiscreteMeasure
from .ptgrid import DyadicRect, DyadicRoot, GridSpec, PointSet, SpaceTimePoint

log = logging.getLogger(__name__)


class PoolTooLarge(ValueError):
    pass


@dataclass
class Cover:
    elements: list
    s: float
    delta: float
    cost: float
    lp_bound: float | None = None
    nodes: int = 0  # branch-and-bound nodes explored

    def to_dict(self):
        return {
            "s": self.s,
            "delta": self.delta,
            "cost": self.cost,
            "lp_bound": self.lp_bound,
            "elements": [[r.gen, list(r.index)] for r in self.elements],
        }


@dataclass
class FrostmanMeasure:
    leaves: list  # DyadicRect at the leaf generation
    masses: np.ndarray
    s: float
    certificate: dict  # generation -> array of slacks d(R)^s - mu(R) over occupied R
    root: DyadicRoot = field(repr=False, default=None)

    @property
    def mass(self) -> float:
        return math.fsum(self.masses)

    @property
    def min_slack(self) -> float:
        return min(float(v.min()) for v in self.certificate.values() if len(v))

    def certificate_ok(self) -> bool:
        return all(bool((v >= 0).all()) for v in self.certificate.values())

    def to_measure(self, E: PointSet, grid: GridSpec) -> DiscreteMeasure:
        """Spread each leaf's mass evenly over the cells of ``E`` inside it."""
        w = np.zeros(grid.shape)
        if not len(E):
            return DiscreteMeasure(grid, w)
        gen = self.leaves[0].gen if self.leaves else 0
        idx = self.root.locate(E.centers(grid), gen)
        keys = {tuple(r.index): m for r, m in zip(self.leaves, self.masses)}
        rows = [tuple(int(v) for v in r) for r in idx]
        counts = {}
        for r in rows:
            counts[r] = counts.get(r, 0) + 1
        vals = np.array([keys.get(r, 0.0) / counts[r] for r in rows])
        w[tuple(E.cells.T)] = vals
        return DiscreteMeasure(grid, w)


class DyadicTree:
    """Occupied dyadic rectangles of a point set, generation ``0..leaf_gen``."""

    def __init__(self, points: np.ndarray, root: DyadicRoot, leaf_gen: int):
        self.root = root
        self.leaf_gen = leaf_gen
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        leaf = np.unique(root.locate(pts, leaf_gen), axis=0) if len(pts) else np.empty((0, root.n + 1), dtype=np.int64)
        self.levels = {leaf_gen: leaf}
        # parent of each occupied rectangle, expressed as row numbers into the coarser level
        self.parent = {}
        cur = leaf
        for g in range(leaf_gen, 0, -1):
            up = self._up(cur)
            uniq, inv = np.unique(up, axis=0, return_inverse=True)
            self.levels[g - 1] = uniq
            self.parent[g] = inv.reshape(-1)
            cur = uniq
        # ancestor row of each leaf at every generation
        self.leaf_anc = {leaf_gen: np.arange(len(leaf))}
        for g in range(leaf_gen, 0, -1):
            self.leaf_anc[g - 1] = self.parent[g][self.leaf_anc[g]]

    def _up(self, idx):
        out = idx.copy()
        out[:, :-1] >>= self.root.l
        out[:, -1] >>= self.root.k
        return out

    def diam(self, g):
        return self.root.diam(g)

    def rects(self, g):
        return [DyadicRect(self.root, g, tuple(int(v) for v in row)) for row in self.levels[g]]

    def children_rows(self, g):
        """For generation ``g < leaf_gen``: list of child row arrays per occupied rectangle."""
        par = self.parent[g + 1]
        order = np.argsort(par, kind="stable")
        splits = np.searchsorted(par[order], np.arange(len(self.levels[g]) + 1))
        return [order[splits[i] : splits[i + 1]] for i in range(len(self.levels[g]))]


def _points(E, grid):
    if isinstance(E, PointSet):
        return E.centers(grid) if len(E) else np.empty((0, len(E.shape)))
    return np.atleast_2d(np.asarray(E, dtype=float))


def default_leaf_gen(grid: GridSpec, root: DyadicRoot) -> int:
    """Finest generation whose rectangles are still at least one cell wide in space and time."""
    g = 0
    while True:
        sx, st = root.sides(g + 1)
        if sx < grid.h * (1 - 1e-9) or st < grid.tau * (1 - 1e-9):
            return g
        g += 1


def _setup(E, grid, root, leaf_gen):
    root = root or DyadicRoot.for_grid(grid)
    if leaf_gen is None:
        leaf_gen = default_leaf_gen(grid, root)
    return root, leaf_gen, DyadicTree(_points(E, grid), root, leaf_gen)


def _first_allowed(tree, delta):
    for g in range(tree.leaf_gen + 1):
        if tree.diam(g) < delta:
            return g
    raise ValueError("delta must exceed the leaf diameter")


def content_upper(E, s: float, delta: float, grid: GridSpec, root: DyadicRoot | None = None, leaf_gen=None) -> Cover:
    """Dyadic cover by descent: keep a rectangle when its cost beats the summed cost of its children's covers.

    Children's covers are built by the same rule, so their costs come from a
    bottom-up pass; the descent then reads off the kept rectangles.
    """
    if not s > 0:
        raise ValueError("s must be positive")
    root, leaf_gen, tree = _setup(E, grid, root, leaf_gen)
    if not len(tree.levels[leaf_gen]):
        return Cover([], s, delta, 0.0)
    g0 = _first_allowed(tree, delta)
    best = {leaf_gen: np.full(len(tree.levels[leaf_gen]), tree.diam(leaf_gen) ** s)}
    keep = {leaf_gen: np.ones(len(tree.levels[leaf_gen]), dtype=bool)}
    for g in range(leaf_gen - 1, g0 - 1, -1):
        summed = np.bincount(tree.parent[g + 1], weights=best[g + 1], minlength=len(tree.levels[g]))
        own = tree.diam(g) ** s
        keep[g] = own <= summed
        best[g] = np.where(keep[g], own, summed)
    kids = {g: tree.children_rows(g) for g in range(g0, leaf_gen)}
    chosen = []
    stack = [(g0, r) for r in range(len(tree.levels[g0]))]
    while stack:
        g, r = stack.pop()
        if keep[g][r]:
            chosen.append((g, r))
        else:
            stack.extend((g + 1, c) for c in kids[g][r][::-1])
    elements = [DyadicRect(root, g, tuple(int(v) for v in tree.levels[g][r])) for g, r in chosen]
    cost = math.fsum(tree.diam(g) ** s for g, _ in chosen)
    return Cover(elements, s, delta, cost)


def content_dp(E, s, delta, grid, root=None, leaf_gen=None) -> float:
    """Optimal dyadic cover cost by the tree recursion ``min(own, sum over children)``."""
    root, leaf_gen, tree = _setup(E, grid, root, leaf_gen)
    if not len(tree.levels[leaf_gen]):
        return 0.0
    g0 = _first_allowed(tree, delta)
    best = np.full(len(tree.levels[leaf_gen]), tree.diam(leaf_gen) ** s)
    for g in range(leaf_gen - 1, g0 - 1, -1):
        summed = np.bincount(tree.parent[g + 1], weights=best, minlength=len(tree.levels[g]))
        best = np.minimum(tree.diam(g) ** s, summed)
    return math.fsum(best)


def content_exact_small(E, s: float, delta: float, grid: GridSpec, root=None, leaf_gen=None, max_pool=2000) -> Cover:
    """Exact minimum-cost dyadic cover by LP-bounded branch and bound.

    Candidates are all occupied rectangles of diameter below ``delta``; each
    must-cover element is an occupied leaf.
    """
    root, leaf_gen, tree = _setup(E, grid, root, leaf_gen)
    nleaf = len(tree.levels[leaf_gen])
    if not nleaf:
        return Cover([], s, delta, 0.0, 0.0)
    g0 = _first_allowed(tree, delta)
    cand = [(g, r) for g in range(g0, leaf_gen + 1) for r in range(len(tree.levels[g]))]
    if len(cand) > max_pool:
        raise PoolTooLarge(f"candidate pool of {len(cand)} exceeds {max_pool}; use greedy")
    cost = np.array([tree.diam(g) ** s for g, _ in cand])
    # incidence: leaf i is covered by candidate (g, r) iff its ancestor at g is r
    A = np.zeros((nleaf, len(cand)))
    for c, (g, r) in enumerate(cand):
        A[tree.leaf_anc[g] == r, c] = 1.0
    best_val = math.inf
    best_x = None
    lp_root = None
    nodes = 0
    stack = [(np.zeros(len(cand)), np.ones(len(cand)))]
    while stack:
        lo, hi = stack.pop()
        nodes += 1
        res = linprog(cost, A_ub=-A, b_ub=-np.ones(nleaf), bounds=list(zip(lo, hi)), method="highs-ds")
        if res.status != 0:
            continue
        if lp_root is None:
            lp_root = float(res.fun)
        if res.fun >= best_val - 1e-12 * max(1.0, best_val):
            continue
        x = res.x
        frac = np.abs(x - np.round(x))
        j = int(np.argmax(frac))
        if frac[j] <= 1e-9:
            xr = np.round(x)
            if (A @ xr >= 1).all():
                val = float(cost @ xr)
                if val < best_val:
                    best_val, best_x = val, xr
            continue
        lo1, hi0 = lo.copy(), hi.copy()
        lo1[j] = 1.0
        hi0[j] = 0.0
        stack.append((lo, hi0))
        stack.append((lo1, hi))
    chosen = [cand[c] for c in np.flatnonzero(best_x > 0.5)]
    elements = [DyadicRect(root, g, tuple(int(v) for v in tree.levels[g][r])) for g, r in chosen]
    return Cover(elements, s, delta, math.fsum(cost[best_x > 0.5]), lp_root, nodes)


def cover_is_feasible(cover: Cover, E, grid: GridSpec, root=None) -> bool:
    """Every point of ``E`` lies in some cover element and every element is finer than delta."""
    pts = _points(E, grid)
    if not len(pts):
        return True
    if not cover.elements:
        return False
    root = root or cover.elements[0].root
    if any(r.diam() >= cover.delta for r in cover.elements):
        return False
    covered = np.zeros(len(pts), dtype=bool)
    by_gen = {}
    for r in cover.elements:
        by_gen.setdefault(r.gen, set()).add(tuple(r.index))
    for g, keys in by_gen.items():
        loc = root.locate(pts, g)
        covered |= np.array([tuple(int(v) for v in row) in keys for row in loc])
    return bool(covered.all())


def frostman_measure(E, s: float, grid: GridSpec, root: DyadicRoot | None = None, leaf_gen=None, safety=1e-12) -> FrostmanMeasure:
    """Bottom-up Frostman construction on the dyadic tree.

    Leaves start with ``d(leaf)^s``; at each coarser generation a rectangle
    whose mass exceeds ``d(R)^s`` has its whole subtree scaled down to
    ``(1 - safety) d(R)^s``, so every slack is nonnegative in floating point.
    """
    root, leaf_gen, tree = _setup(E, grid, root, leaf_gen)
    nleaf = len(tree.levels[leaf_gen])
    if not nleaf:
        raise ValueError("empty set at leaf resolution")
    m = np.full(nleaf, tree.diam(leaf_gen) ** s * (1 - safety))
    for g in range(leaf_gen - 1, -1, -1):
        anc = tree.leaf_anc[g]
        tot = np.bincount(anc, weights=m, minlength=len(tree.levels[g]))
        cap = tree.diam(g) ** s
        over = tot > cap * (1 - safety)
        if over.any():
            scale = np.ones(len(tot))
            scale[over] = cap * (1 - safety) / tot[over]
            m = m * scale[anc]
    cert = {}
    for g in range(leaf_gen + 1):
        anc = tree.leaf_anc[g]
        order = np.argsort(anc, kind="stable")
        splits = np.searchsorted(anc[order], np.arange(len(tree.levels[g]) + 1))
        sums = np.array([math.fsum(m[order[splits[i] : splits[i + 1]]]) for i in range(len(tree.levels[g]))])
        cert[g] = tree.diam(g) ** s - sums
    return FrostmanMeasure(tree.rects(leaf_gen), m, s, cert, root)


def packing_lp(E, s: float, grid: GridSpec, root=None, leaf_gen=None) -> float:
    """Maximal total leaf mass subject to ``mu(R) <= d(R)^s`` for every occupied rectangle."""
    root, leaf_gen, tree = _setup(E, grid, root, leaf_gen)
    nleaf = len(tree.levels[leaf_gen])
    if not nleaf:
        return 0.0
    rows, caps = [], []
    for g in range(leaf_gen + 1):
        anc = tree.leaf_anc[g]
        for r in range(len(tree.levels[g])):
            rows.append(anc == r)
            caps.append(tree.diam(g) ** s)
    A = np.array(rows, dtype=float)
    res = linprog(-np.ones(nleaf), A_ub=A, b_ub=np.array(caps), bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"packing LP failed: {res.message}")
    return float(-res.fun)


def content_trace(E, s, grid, root=None, leaf_gen=None, method="upper"):
    """Content over decreasing ``delta = root diameter * 2^-g`` for ``g = 0..leaf_gen``."""
    root, leaf_gen, _ = _setup(E, grid, root, leaf_gen)
    out = []
    for g in range(leaf_gen + 1):
        delta = root.diam(g) * (1 + 1e-9)
        if method == "upper":
            val = content_upper(E, s, delta, grid, root, leaf_gen).cost
        else:
            val = content_dp(E, s, delta, grid, root, leaf_gen)
        out.append((delta, val))
    return out


def decay_diagnostic(fm: FrostmanMeasure, q: float, p: float) -> float:
    """``max_R mu(R) / d(R)^(s - (q - p))`` over occupied dyadic rectangles (diagnostic only)."""
    expo = fm.s - (q - p)
    worst = 0.0
    for g, sl in fm.certificate.items():
        d = fm.root.diam(g)
        mass = d**fm.s - sl
        worst = max(worst, float(np.max(mass)) / d**expo)
    return worst


# ------------------------------------------------------------------ Wolff


def _mass_in_lower_cylinder(mu: DiscreteMeasure, z: SpaceTimePoint, rho: float) -> float:
    g = mu.grid
    w = mu.weights
    t, *xs = g.coords()
    dt = z.t - t
    inside = (dt >= -1e-12) & (dt < rho**g.pf)
    r2 = sum((x - c) ** 2 for x, c in zip(xs, z.x))
    inside = inside & (r2 <= rho * rho * (1 + 1e-12))
    return float(w[np.broadcast_to(inside, g.shape)].sum())


def wolff_potential(mu, z: SpaceTimePoint, r: float, p=None, n=None, J: int | None = None) -> float:
    """Dyadic quadrature of the Wolff-type potential with lower half cylinders.

    ``[sum_j ln2 * (mu(Q^-_{rho_j}(z)) / rho_j^n)^(p/(n(p-2)+p))]^((n(p-2)+p)/p)``
    with ``rho_j = r 2^-j``.  ``mu`` is a :class:`DiscreteMeasure` or a callable
    ``rho -> mass`` (then ``p``, ``n`` and ``J`` are required).
    """
    if not r > 0:
        raise ValueError("r must be positive")
    if callable(mu):
        mass_at = mu
        if J is None or p is None or n is None:
            raise ValueError("callable measures need p, n and J")
    else:
        g = mu.grid
        p = g.pf if p is None else float(p)
        n = g.n if n is None else n
        if J is None:
            J = max(0, int(math.ceil(math.log2(r / min(g.h, g.tau ** (1.0 / p))))))

        def mass_at(rho):
            return _mass_in_lower_cylinder(mu, z, rho)

    p = float(p)
    a = p / (n * (p - 2) + p)
    total = 0.0
    for j in range(J + 1):
        rho = r * 2.0**-j
        m = mass_at(rho)
        if m > 0:
            total += math.log(2.0) * (m / rho**n) ** a
    return total ** (1.0 / a) if total > 0 else 0.0


# --------------------------------------------------------- Lebesgue bound


@dataclass
class LebesgueReport:
    volume: float
    cap: float
    ratio: float
    vacuous: bool = False
    violation: bool = False


def lebesgue_capacity_check(E: PointSet, grid: GridSpec, params=None, mass_tol: float = 1e-12, cap=None) -> LebesgueReport:
    """``|E| / cap(E)^((n+p)/n)`` with ``|E|`` the lattice volume."""
    from .capacity import cap_balayage

    vol = len(E) * grid.cell_volume
    if not len(E):
        return LebesgueReport(0.0, 0.0, 0.0, vacuous=True)
    c = cap_balayage(E, grid, params).value if cap is None else cap
    if c <= mass_tol:
        return LebesgueReport(vol, c, math.inf, violation=vol > 0)
    return LebesgueReport(vol, c, vol / c ** ((grid.n + grid.pf) / grid.n))


# ------------------------------------------------------------ dust sets


def dyadic_dust(root: DyadicRoot, base, depth: int, keep: int, rng: np.random.Generator | None = None, pattern=None):
    """Leaf index rows of a dust set: inside each chosen rectangle keep ``keep`` children.

    ``base`` is a :class:`DyadicRect`; with ``pattern`` (a list of child
    offsets) the same children are kept everywhere, otherwise they are
    drawn at random from ``rng``.  Returns a :class:`DyadicRect` list at
    generation ``base.gen + depth``.
    """
    nb = root.branching
    if not 1 <= keep <= nb:
        raise ValueError("keep must lie in 1..branching")
    current = [base]
    for _ in range(depth):
        nxt = []
        for R in current:
            kids = _children(R)
            if pattern is not None:
                sel = pattern
            else:
                sel = sorted(rng.choice(nb, size=keep, replace=False).tolist())
            nxt.extend(kids[i] for i in sel)
        current = nxt
    return current


def _children(R):
    from .ptgrid import dyadic_children

    return dyadic_children(R)


def rects_to_pointset(rects, grid: GridSpec) -> PointSet:
    """Interior cells whose centers fall in any of the given dyadic rectangles."""
    m = np.zeros(grid.shape, dtype=bool)
    if not rects:
        return PointSet.from_mask(m)
    root = rects[0].root
    gen = rects[0].gen
    sx, st = root.sides(gen)
    cx, ct = root.counts(gen)

    def axis_index(vals, origin, side, count):
        u = (vals - origin) / side
        idx = np.floor(u).astype(np.int64)
        # the root's upper face belongs to the last rectangle
        idx[(idx == count) & (u <= count + 1e-9)] = count - 1
        idx[(u < 0) | (u > count + 1e-9)] = -1
        return idx

    t_idx = axis_index(grid.times(), root.t0, st, ct)
    x_idx = [axis_index(grid.axis(a), root.origin[a], sx, cx) for a in range(grid.n)]
    for r in rects:
        sel = [t_idx == r.index[-1]] + [x_idx[a] == r.index[a] for a in range(grid.n)]
        m[np.ix_(*sel)] = True
    m[0] = False
    m &= grid.interior_mask()[None]
    return PointSet.from_mask(m)
