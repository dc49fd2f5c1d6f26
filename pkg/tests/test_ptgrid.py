import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parcap.ptgrid import (
    Box,
    Disc,
    DyadicRoot,
    GridSpec,
    ParabolicCylinder,
    PointSet,
    ShapeUnion,
    SpaceTimePoint,
    d_p,
    dyadic_children,
    dyadic_cover,
    p_diam,
    rasterize,
)


def test_gridspec_invariants():
    g = GridSpec.uniform(1, 64, 256, T=1.0, p=3)
    assert g.cells == (64,) and g.levels == 256
    assert g.shape == (257, 65)
    assert g.p == Fraction(3)
    with pytest.raises(ValueError):
        GridSpec(1, (1.0,), 0.3, 0.01, 1.0, 3)  # extent/h not an integer
    with pytest.raises(ValueError):
        GridSpec(1, (1.0,), 0.25, 0.01, 1.0, "3/2")  # p = 2 is kept for validation runs only
    g2 = GridSpec(1, (1.0,), 0.25, 0.25, 1.0, "5/2")
    assert (g2.k, g2.l) == (5, 2)


@pytest.mark.parametrize(
    "a,b,p,expected",
    [
        (((1.0, 0.0), 0.0), ((0.0, 0.0), 0.0), 3, 1.0),
        (((0.0,), 8.0), ((0.0,), 0.0), 3, 2.0),
        (((3.0, 0.0), 16.0), ((0.0, 0.0), 0.0), 4, 3.0),
    ],
)
def test_d_p_examples(a, b, p, expected):
    assert d_p(SpaceTimePoint(*a), SpaceTimePoint(*b), p) == pytest.approx(expected)


coord = st.floats(-5, 5, allow_nan=False)
point = st.builds(lambda x, y, t: SpaceTimePoint((x, y), t), coord, coord, coord)


@settings(max_examples=300, deadline=None)
@given(point, point, point, st.sampled_from([3, 2.5, 4, Fraction(7, 3)]))
def test_d_p_is_a_metric(a, b, c, p):
    ab, ba, ac, bc = d_p(a, b, p), d_p(b, a, p), d_p(a, c, p), d_p(b, c, p)
    assert ab >= 0 and ab == ba
    assert d_p(a, a, p) == 0
    assert ac <= ab + bc + 1e-9 * (1 + ab + bc)
    if ab == 0:
        assert a.x == b.x and a.t == b.t


def _brute_cylinder(grid, z, r):
    # independent membership scan over all cells
    pf = float(grid.p)
    cells = []
    for j in range(1, grid.levels + 1):
        for i in range(1, grid.cells[0]):
            x, t = i * grid.h, j * grid.tau
            if abs(x - z.x[0]) <= r * (1 + 1e-12) and abs(t - z.t) <= r**pf * (1 + 1e-12):
                cells.append((j, i))
    return sorted(cells)


@pytest.mark.parametrize("offset", [0.0, 0.37, 0.5])
def test_rasterize_cylinder_matches_scan(offset):
    g = GridSpec.uniform(1, 32, 512, T=1.0, p=3)
    z = SpaceTimePoint((0.5 + offset * g.h,), 0.5 + offset * g.tau)
    r = 4 * g.h
    S = rasterize(ParabolicCylinder(z, r), g)
    assert sorted(map(tuple, S.cells.tolist())) == _brute_cylinder(g, z, r)


def test_rasterize_trivial_cases():
    g = GridSpec.uniform(1, 32, 128, T=1.0, p=3)
    outside = ParabolicCylinder(SpaceTimePoint((3.0,), 0.5), 0.1)
    assert len(rasterize(outside, g)) == 0
    z = SpaceTimePoint((16 * g.h,), 64 * g.tau)
    one = rasterize(ParabolicCylinder(z, 0.4 * g.h), g)
    assert len(one) == 1 and tuple(one.cells[0]) == (64, 16)


def test_rasterize_monotone():
    g = GridSpec.uniform(2, 16, 64, T=1.0, p=3)
    z = SpaceTimePoint((0.5, 0.5), 0.5)
    small = rasterize(ParabolicCylinder(z, 0.2), g)
    big = rasterize(ShapeUnion((ParabolicCylinder(z, 0.3), Box((0.1, 0.1), (0.2, 0.2), 0.1, 0.2))), g)
    assert len(small) and small.issubset(big)


def test_disc_is_single_level():
    g = GridSpec.uniform(1, 32, 64, T=1.0, p=3)
    D = rasterize(Disc((0.5,), 0.2, 0.5 + 0.5 * g.tau), g)
    levels = set(D.cells[:, 0].tolist())
    assert len(levels) == 1
    assert len(D) == 13


def test_pointset_algebra_and_margin():
    g = GridSpec.uniform(1, 16, 16, T=1.0, p=3)
    m = np.zeros(g.shape, bool)
    m[8, 8] = True
    S = PointSet.from_mask(m)
    assert S.margin() == 8
    assert len(S.dilate(1)) == 9
    assert S.dilate(1).erode(1) == S
    assert len(S | PointSet.empty(g)) == 1 and len(S & PointSet.empty(g)) == 0


def test_p_diam_examples():
    assert p_diam(np.array([[0.0, 0.0]]), mode="points", p=3) == 0.0
    assert p_diam(np.array([[0.0, 0.0], [1.0, 1.0]]), mode="points", p=3) == pytest.approx(1.0)
    g = GridSpec.uniform(1, 64, 4096, T=1.0, p=3)
    r = 0.2
    S = rasterize(ParabolicCylinder(SpaceTimePoint((0.5,), 0.5), r), g)
    d = p_diam(S, g)
    slack = 2 * (g.h + g.tau ** (1 / 3))
    assert 2 * r - slack <= d <= 2 * r + 1e-12 or d <= 2 * r + slack
    one = PointSet.from_mask(np.pad(np.ones((1, 1), bool), ((10, 4096 - 10), (10, 64 - 10))))
    assert p_diam(one, g) > 0


@pytest.mark.parametrize("n,p,expected", [(1, 3, 16), (2, Fraction(5, 2), 512), (2, 3, 32)])
def test_dyadic_children_count_and_tiling(n, p, expected):
    root = DyadicRoot((0.0,) * n, 0.0, 1.0, p, n)
    R = root.rect(0, (0,) * (n + 1))
    kids = dyadic_children(R)
    assert len(kids) == expected == root.branching
    assert math.isclose(sum(k.volume for k in kids), R.volume, rel_tol=1e-14)
    assert len({k.index for k in kids}) == expected
    sx, st_ = R.sides
    cx, ct = kids[0].sides
    assert cx == pytest.approx(sx * 2.0 ** -root.l) and ct == pytest.approx(st_ * 2.0 ** -root.k)


def test_dyadic_root_counts_generation():
    root = DyadicRoot((0.0,), 0.0, 1.0, 3, 1)
    for i in range(4):
        cx, ct = root.counts(i)
        assert cx * ct == 2 ** (4 * i)


def test_p_diam_of_dyadic_rect_closed_form():
    root = DyadicRoot((0.0, 0.0), 0.0, 1.0, 3, 2)
    rng = np.random.default_rng(1)
    for gen in range(3):
        R = root.rect(gen, (0, 0, 0))
        sx, st_ = R.sides
        # sampled sup over corner pairs
        corners = np.array([[t, x, y] for t in (0, st_) for x in (0, sx) for y in (0, sx)])
        sampled = max(
            max(np.hypot(*(a[1:] - b[1:])), abs(a[0] - b[0]) ** (1 / 3)) for a, b in itertools.product(corners, corners)
        )
        inner = rng.uniform(0, 1, size=(200, 3)) * [st_, sx, sx]
        extra = max(max(np.hypot(*(a[1:] - b[1:])), abs(a[0] - b[0]) ** (1 / 3)) for a, b in zip(inner, inner[::-1]))
        assert R.diam() == pytest.approx(max(math.sqrt(2) * sx, st_ ** (1 / 3)))
        assert sampled == pytest.approx(R.diam()) and extra <= R.diam() + 1e-12


def test_dyadic_cover_single_cell_and_oracle():
    g = GridSpec.uniform(1, 16, 64, T=1.0, p=3)
    root = DyadicRoot.for_grid(g)
    m = np.zeros(g.shape, bool)
    m[33, 5] = True
    one = PointSet.from_mask(m)
    for gen in range(3):
        assert len(dyadic_cover(one, g, gen, root)) == 1
    rng = np.random.default_rng(7)
    m = np.zeros(g.shape, bool)
    idx = rng.choice(np.flatnonzero(g.interior_mask()[None].repeat(g.levels + 1, 0)[1:].ravel()), 10, replace=False)
    m[1:].ravel()[idx] = True
    S = PointSet.from_mask(m)
    cover = dyadic_cover(S, g, 3, root)
    # exhaustive oracle: every gen-3 rectangle tested against every point
    pts = S.centers(g)
    cx, ct = root.counts(3)
    sx, st_ = root.sides(3)
    hits = set()
    for ix in range(cx):
        for it in range(ct):
            lo_x, lo_t = ix * sx, it * st_
            inside = (pts[:, 1] >= lo_x) & ((pts[:, 1] < lo_x + sx) | ((ix == cx - 1) & (pts[:, 1] <= lo_x + sx)))
            inside &= (pts[:, 0] >= lo_t) & ((pts[:, 0] < lo_t + st_) | ((it == ct - 1) & (pts[:, 0] <= lo_t + st_)))
            if inside.any():
                hits.add((ix, it))
    assert {R.index for R in cover} == hits


def test_dyadic_cover_root_too_small():
    g = GridSpec.uniform(1, 16, 64, T=1.0, p=3)
    root = DyadicRoot((0.0,), 0.0, 0.25, 3, 1)
    S = rasterize(ParabolicCylinder(SpaceTimePoint((0.8,), 0.5), 0.05), g)
    with pytest.raises(ValueError, match="root too small"):
        dyadic_cover(S, g, 1, root)
