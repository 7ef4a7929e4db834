import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hieradmm.grid import CouplingConstraint, power_constraint
from hieradmm.prox import RootObjective, project_branch, prox_tracking
from hieradmm.tree import ROOT

L1 = (1, 1)


def test_project_examples():
    up = power_constraint(ROOT, [L1], [5, 5])
    np.testing.assert_array_equal(project_branch(up, [6, 4]), [5, 4])
    np.testing.assert_array_equal(project_branch(up, [1, 2]), [1, 2])
    box = power_constraint(ROOT, [L1], [1, 1], lower=[-1, -1])
    np.testing.assert_array_equal(project_branch(box, [-3, 0.5]), [-1, 0.5])


def test_prox_examples():
    # Grid oracle for min y^2 + (y - 3)^2 / (2 * 0.5): minimizer 1.5.
    grid = np.linspace(-5, 5, 1_000_001)
    brute = grid[np.argmin(grid**2 + (grid - 3) ** 2 / 1.0)]
    out = prox_tracking([3.0], 0.5, RootObjective([0.0], 1.0))
    assert out[0] == pytest.approx(1.5)
    assert out[0] == pytest.approx(brute, abs=1e-5)

    target = np.array([0.3, -2.0])
    np.testing.assert_allclose(prox_tracking(target, 2.0, RootObjective(target, 3.0)), target)
    z = np.array([4.0, -1.0])
    np.testing.assert_array_equal(prox_tracking(z, 1.0, RootObjective([0, 0], 0.0)), z)
    with pytest.raises(ValueError):
        prox_tracking(z, 0.0, RootObjective([0, 0], 1.0))


def _random_box(rng, T):
    lo = rng.uniform(-5, 1, T)
    hi = lo + rng.uniform(0, 5, T)
    lo[rng.random(T) < 0.3] = -np.inf
    hi[rng.random(T) < 0.3] = np.inf
    return CouplingConstraint(ROOT, {L1: 1.0}, hi, lo)


def test_projection_idempotent_and_nonexpansive():
    rng = np.random.default_rng(0)
    T = 8
    for _ in range(1000):
        c = _random_box(rng, T)
        a, b = rng.normal(0, 5, T), rng.normal(0, 5, T)
        pa, pb = project_branch(c, a), project_branch(c, b)
        np.testing.assert_array_equal(project_branch(c, pa), pa)
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12
        assert np.all(pa <= c.upper) and np.all(pa >= c.lower)


def test_prox_matches_scalar_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        z, t = rng.uniform(-10, 10, 2)
        rho, w = rng.uniform(0.05, 5), rng.uniform(0, 5)
        f = lambda y: w * (y - t) ** 2 + (y - z) ** 2 / (2 * rho)
        # Coarse grid, then refine around the best point.
        grid = np.linspace(-12, 12, 24001)
        best = grid[np.argmin(f(grid))]
        for width in (1e-3, 1e-6):
            grid = np.linspace(best - width, best + width, 2001)
            best = grid[np.argmin(f(grid))]
        got = prox_tracking([z], rho, RootObjective([t], w))[0]
        assert abs(got - best) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.floats(1e-3, 1e3), st.floats(0, 1e3))
def test_prox_optimality_condition(z, rho, w):
    z = np.array(z)
    target = np.array([1.0, -1.0, 0.0])
    y = prox_tracking(z, rho, RootObjective(target, w))
    grad = 2 * w * (y - target) + (y - z) / rho
    np.testing.assert_allclose(grad, 0.0, atol=1e-8 * (1 + np.abs(z).max() / rho + w * 2))
