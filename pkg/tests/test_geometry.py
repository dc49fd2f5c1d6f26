import itertools
import math

import numpy as np
import pytest

from parcap.experiments import dust_levels
from parcap.geometry import (
    PoolTooLarge,
    content_dp,
    content_exact_small,
    content_trace,
    content_upper,
    cover_is_feasible,
    frostman_measure,
    lebesgue_capacity_check,
    packing_lp,
    rects_to_pointset,
    wolff_potential,
)
from parcap.ppde import DiscreteMeasure
from parcap.ptgrid import Disc, DyadicRoot, GridSpec, PointSet, SpaceTimePoint, rasterize

ROOT = DyadicRoot((0.0,), 0.0, 1.0, 3, 1)


def _random_points(rng, k):
    # (t, x) pairs inside the root [0,1) x [0,1)
    return rng.uniform(0, 1, size=(k, 2)) * 0.999


def _rect_of(pt, gen):
    sx, st = ROOT.sides(gen)
    return (gen, int(pt[1] // sx), int(pt[0] // st))


def _exhaustive_cover(pts, s, delta, leaf_gen):
    # candidates: every occupied rectangle finer than delta, enumerated by brute force over subsets
    cands = sorted({_rect_of(p, g) for p in pts for g in range(leaf_gen + 1) if ROOT.diam(g) < delta})
    best = math.inf
    for k in range(1, len(cands) + 1):
        for sub in itertools.combinations(cands, k):
            cost = sum(ROOT.diam(c[0]) ** s for c in sub)
            if cost >= best:
                continue
            if all(any(_rect_of(p, c[0]) == c for c in sub) for p in pts):
                best = cost
    return best


def _recursive_cover(pts, s, delta, gen, leaf_gen):
    # optimal cover restricted to the rectangle holding all of ``pts`` at ``gen``
    own = ROOT.diam(gen) ** s if ROOT.diam(gen) < delta else math.inf
    if gen == leaf_gen:
        return own
    groups = {}
    for p in pts:
        groups.setdefault(_rect_of(p, gen + 1), []).append(p)
    split = sum(_recursive_cover(v, s, delta, gen + 1, leaf_gen) for v in groups.values())
    return min(own, split)


@pytest.mark.parametrize("seed", range(6))
def test_exact_cover_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    pts = _random_points(rng, 3)
    s, leaf = 1.5, 2
    delta = ROOT.diam(0) * 1.01
    exact = content_exact_small(pts, s, delta, None, ROOT, leaf)
    assert exact.cost == pytest.approx(_exhaustive_cover(pts, s, delta, leaf), rel=1e-12)
    assert cover_is_feasible(exact, pts, None, ROOT)
    assert content_dp(pts, s, delta, None, ROOT, leaf) == pytest.approx(exact.cost, rel=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_dp_matches_recursive_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    pts = _random_points(rng, 40)
    for s in (0.8, 2.0, 3.5):
        delta = ROOT.diam(1) * 1.01
        ref = sum(_recursive_cover(v, s, delta, 1, 3) for v in _group(pts, 1).values())
        assert content_dp(pts, s, delta, None, ROOT, 3) == pytest.approx(ref, rel=1e-12)


def _group(pts, gen):
    out = {}
    for p in pts:
        out.setdefault(_rect_of(p, gen), []).append(p)
    return out


def test_greedy_lp_and_exact_are_ordered():
    rng = np.random.default_rng(11)
    for _ in range(10):
        pts = _random_points(rng, 12)
        s = rng.uniform(0.5, 3.5)
        delta = ROOT.diam(0) * 1.01
        up = content_upper(pts, s, delta, None, ROOT, 3)
        ex = content_exact_small(pts, s, delta, None, ROOT, 3)
        assert cover_is_feasible(up, pts, None, ROOT)
        assert ex.lp_bound <= ex.cost * (1 + 1e-9)
        assert ex.cost <= up.cost * (1 + 1e-12)
        assert up.cost <= 2 * ex.cost
        assert packing_lp(pts, s, None, ROOT, 3) <= ex.cost * (1 + 1e-9)


def test_pool_limit():
    pts = _random_points(np.random.default_rng(0), 50)
    with pytest.raises(PoolTooLarge):
        content_exact_small(pts, 1.0, 2.0, None, ROOT, 3, max_pool=10)


def test_empty_and_single_leaf():
    empty = np.empty((0, 2))
    assert content_upper(empty, 1.0, 2.0, None, ROOT, 3).cost == 0.0
    assert content_dp(empty, 1.0, 2.0, None, ROOT, 3) == 0.0
    one = np.array([[0.3, 0.6]])
    fm = frostman_measure(one, 2.0, None, ROOT, 3)
    assert fm.certificate_ok() and fm.mass > 0
    assert fm.mass == pytest.approx(ROOT.diam(3) ** 2, rel=1e-9)
    with pytest.raises(ValueError):
        frostman_measure(empty, 1.0, None, ROOT, 3)


def test_content_trace_nonincreasing_delta():
    pts = _random_points(np.random.default_rng(2), 30)
    tr = content_trace(pts, 2.0, None, ROOT, 3, method="exact-dp")
    deltas = [d for d, _ in tr]
    vals = [v for _, v in tr]
    assert deltas == sorted(deltas, reverse=True)
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))  # finer covers cost more


def test_frostman_certificates_on_random_dust():
    root = DyadicRoot((0.25,), 0.25, 0.5, 3, 1)
    g = GridSpec.uniform(1, 256, 16384, T=0.5, p=3)
    rng = np.random.default_rng(2024)
    for i in range(20):
        keep = int(rng.integers(1, 17))
        depth = int(rng.integers(1, 4))
        rects = dust_levels(root, (keep,), depth, rng)[-1]
        pts = np.array([[r.lower[1] + 0.5 * r.sides[1], r.lower[0][0] + 0.5 * r.sides[0]] for r in rects])
        s = float(rng.uniform(0.5, 3.0))
        fm = frostman_measure(pts, s, g, root, depth)
        assert all((v >= 0).all() for v in fm.certificate.values())
        lp = packing_lp(pts, s, g, root, depth)
        assert fm.mass >= lp / root.branching
        assert fm.mass <= lp * (1 + 1e-9)
        try:
            ex = content_exact_small(pts, s, root.diam(0) * 1.01, g, root, depth)
        except PoolTooLarge:
            continue
        up = content_upper(pts, s, root.diam(0) * 1.01, g, root, depth)
        assert up.cost <= 2 * ex.cost


def test_wolff_closed_forms():
    p, n = 3.0, 1
    a = p / (n * (p - 2) + p)
    assert wolff_potential(lambda rho: 0.0, SpaceTimePoint((0.0,), 0.0), 1.0, p, n, 8) == 0.0
    # mu(Q_rho) = rho^n gives a constant summand ln 2 per scale
    val = wolff_potential(lambda rho: rho**n, SpaceTimePoint((0.0,), 0.0), 1.0, p, n, 9)
    assert val == pytest.approx((10 * math.log(2)) ** (1 / a))
    # mu(Q_rho) = rho^(n+1): geometric series with ratio 2^-a
    val = wolff_potential(lambda rho: rho ** (n + 1), SpaceTimePoint((0.0,), 0.0), 1.0, p, n, 30)
    geo = math.log(2) * (1 - 2 ** (-a * 31)) / (1 - 2**-a)
    assert val == pytest.approx(geo ** (1 / a))


def test_wolff_far_dirac_is_zero_and_near_is_positive():
    g = GridSpec.uniform(1, 64, 256, T=1.0, p=3)
    mu = DiscreteMeasure.dirac(g, SpaceTimePoint((0.2,), 0.2), 1.0)
    assert wolff_potential(mu, SpaceTimePoint((0.8,), 0.9), 0.1) == 0.0
    assert wolff_potential(mu, SpaceTimePoint((0.2,), 0.25), 0.5) > 0


def test_lebesgue_check_trivial_cases():
    g = GridSpec.uniform(1, 32, 128, T=0.5, p=3)
    assert lebesgue_capacity_check(PointSet.empty(g), g).vacuous
    D = rasterize(Disc((0.5,), 0.2, 0.25), g)
    rep = lebesgue_capacity_check(D, g)
    assert rep.volume > 0 and rep.cap > 0 and math.isfinite(rep.ratio)


def test_rects_to_pointset_cells_inside():
    root = DyadicRoot((0.25,), 0.25, 0.5, 3, 1)
    g = GridSpec.uniform(1, 64, 1024, T=0.5, p=3)
    rects = dust_levels(root, (3,), 1, np.random.default_rng(0))[-1]
    S = rects_to_pointset(rects, g)
    pts = S.centers(g)
    for t, x in pts:
        assert any(r.lower[1] <= t <= r.lower[1] + r.sides[1] and r.lower[0][0] <= x <= r.lower[0][0] + r.sides[0] for r in rects)
