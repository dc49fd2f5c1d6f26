import itertools
import warnings

import numpy as np
import pytest
from scipy.optimize import fsolve, minimize

from parcap.obstacle import lambda_scaling_check, lambda_sweep, reduite, solve_obstacle
from parcap.ppde import DiscreteMeasure, SolverParams, apply_operator, solve_forward
from parcap.ptgrid import Box, GridSpec, ParabolicCylinder, PointSet, SpaceTimePoint, rasterize


# ----------------------------------------------------------- tiny oracle


def _step_residual(u_in, u_prev_in, h, tau, eps, p):
    # written out by hand: Phi_i = u_i - u_prev_i + (tau/h) (F_{i-1} - F_i), zero end values
    u = np.concatenate([[0.0], u_in, [0.0]])
    g = np.diff(u) / h
    F = (g * g + eps * eps) ** ((p - 2) / 2) * g
    return u_in - u_prev_in + tau / h * (F[:-1] - F[1:])


def _step_energy(u_in, u_prev_in, h, tau, eps, p):
    u = np.concatenate([[0.0], u_in, [0.0]])
    g = np.diff(u) / h
    d = u_in - u_prev_in
    return 0.5 * d @ d + tau / h * h / p * np.sum((g * g + eps * eps) ** (p / 2))


def _enumerate_active_sets(u_prev, psi, h, tau, eps, p):
    m = len(u_prev)
    for active in itertools.product((False, True), repeat=m):
        A = np.array(active)
        free = ~A

        def eqs(z):
            u = psi.copy()
            u[free] = z
            return _step_residual(u, u_prev, h, tau, eps, p)[free]

        u = psi.copy()
        if free.any():
            z0 = np.maximum(u_prev, psi)[free] + 0.01
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)  # fsolve stalls at machine precision
                u[free] = fsolve(eqs, z0, xtol=1e-12)
        phi = _step_residual(u, u_prev, h, tau, eps, p)
        if (u >= psi - 1e-9).all() and (phi[A] >= -1e-9).all() and np.abs(phi[free]).max(initial=0) < 1e-9:
            return u
    return None


def test_obstacle_matches_brute_force_tiny():
    g = GridSpec.uniform(1, 5, 3, T=0.3, p=3)
    psi = np.zeros(g.shape)
    psi[1:, 2] = 1.0  # single interior node, all positive levels
    params = SolverParams(newton_tol=1e-12)
    sol = solve_obstacle(psi, g, params)
    eps = params.eps_for(g)
    u_prev = np.zeros(4)
    for j in range(1, g.levels + 1):
        ob = psi[j, 1:-1]
        oracle = _enumerate_active_sets(u_prev, ob, g.h, g.tau, eps, 3.0)
        assert oracle is not None
        # second oracle: convex minimization of the step energy under u >= psi
        res = minimize(
            _step_energy,
            np.maximum(u_prev, ob) + 0.05,
            args=(u_prev, g.h, g.tau, eps, 3.0),
            method="SLSQP",
            constraints=[{"type": "ineq", "fun": lambda u, ob=ob: u - ob}],
            options={"ftol": 1e-15, "maxiter": 500},
        )
        np.testing.assert_allclose(sol.R.values[j, 1:-1], oracle, atol=1e-6)
        np.testing.assert_allclose(res.x, oracle, atol=1e-5)
        u_prev = oracle


def test_zero_obstacle_gives_zero():
    g = GridSpec.uniform(1, 16, 32, T=0.5, p=3)
    sol = solve_obstacle(np.zeros(g.shape), g)
    assert not sol.R.values.any() and sol.mass == 0.0


@pytest.fixture(scope="module")
def cyl_setup():
    g = GridSpec.uniform(1, 32, 128, T=0.5, p=3)
    K = rasterize(ParabolicCylinder(SpaceTimePoint((0.5,), 0.25), 0.12), g)
    sol = reduite(1.0, K, g)
    return g, K, sol


def test_reduite_is_admissible_and_complementary(cyl_setup):
    g, K, sol = cyl_setup
    R = sol.R.values
    assert (R[K.mask()] >= 1 - 1e-9).all()
    assert (R >= -1e-12).all() and R.max() <= 1 + 1e-9
    assert (sol.mu.weights >= 0).all() and sol.mass > 0
    # the measure lives on the contact set
    off = ~sol.contact.mask()
    assert sol.mu.weights[off].max() <= 1e-8 * sol.mu.weights.max()
    # the step residual is a supersolution inequality everywhere
    r = apply_operator(sol.R)
    assert r.values.min() >= -1e-6 / g.tau


def test_reduite_below_any_supersolution(cyl_setup):
    g, K, sol = cyl_setup
    # a heat-like supersolution: forward solve with a strong source around K
    src = DiscreteMeasure.uniform_on(K.dilate(2), g, 2.0)
    v = solve_forward(g, src)
    assert (v.values[K.mask()] >= 1).all()  # precondition: v is admissible
    assert (sol.R.values <= v.values + 1e-8).all()


def test_reduite_monotone_in_set(cyl_setup):
    g, K, sol = cyl_setup
    big = K | rasterize(Box((0.2,), (0.3,), 0.3, 0.35), g)
    sol2 = reduite(1.0, big, g)
    assert (sol2.R.values >= sol.R.values - 1e-9).all()
    assert sol2.mass >= sol.mass - 1e-12


def test_lambda_scaling(cyl_setup):
    g, K, _ = cyl_setup
    assert lambda_scaling_check(K, 1.0, g) == 1.0
    rows = lambda_sweep(K, [0.25, 0.5, 1.0, 2.0], g)
    ratios = [r for _, r in rows]
    assert all(a < b for a, b in zip(ratios, ratios[1:]))
    with pytest.raises(ValueError):
        lambda_scaling_check(PointSet.empty(g), 0.5, g)
