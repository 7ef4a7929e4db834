import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import grid_search
from hieradmm.agent import (
    Battery, InfeasibleError, Prosumer, ReferenceBundle, cost, local_update, local_update_batch, soc_trajectory,
)

LEAF = (1, 1)


def prosumer(P, pb=0.0, ps=0.0, cap=100.0, soc0=50.0, pmax=100.0, dt=1.0, pdis=None):
    b = Battery(cap, soc0, pmax, pmax if pdis is None else pdis, dt)
    return Prosumer(LEAF, b, np.asarray(P, dtype=float), pb, ps)


def bundle(*pairs):
    refs = ReferenceBundle()
    for k, (r, a) in enumerate(pairs):
        refs.add(f"c{k}", r, a)
    return refs


def test_cost_examples():
    p = prosumer([1.0, -2.0], 0.25, 0.10)
    assert cost(p, [0.5, 0.5]) == pytest.approx(0.225)
    assert cost(p, [-1.0, 2.0]) == 0.0
    flat = prosumer([1.0, -2.0, 0.3], 0.2, 0.2)
    x = np.array([0.1, 0.4, -3.0])
    assert cost(flat, x) == pytest.approx(0.2 * np.sum(flat.p_uncontrolled + x))
    with pytest.raises(ValueError):
        cost(p, [1.0])


def test_soc_examples():
    np.testing.assert_allclose(soc_trajectory(Battery(10, 5, 2, 2, 1.0), [1, -2]), [6, 4])
    np.testing.assert_allclose(soc_trajectory(Battery(10, 5, 2, 2, 1.0), [0, 0, 0]), [5, 5, 5])
    np.testing.assert_allclose(soc_trajectory(Battery(10, 0, 2, 2, 0.5), [2, 2]), [1, 2])


def test_battery_validation():
    with pytest.raises(InfeasibleError):
        Battery(5, 6, 1, 1)
    with pytest.raises(InfeasibleError):
        Battery(5, 1, -1, 1)
    with pytest.raises(ValueError, match="non-convex"):
        Prosumer(LEAF, Battery(5, 1, 1, 1), [0.0], 0.1, 0.2)


def test_local_update_examples():
    x = local_update(prosumer([0.0]), [0.0], bundle(([2.0], 1.0)), 1.0)
    assert x[0] == pytest.approx(-2.0, abs=1e-6)
    x = local_update(prosumer([0.0], pdis=1.0), [0.0], bundle(([2.0], 1.0)), 1.0)
    assert x[0] == pytest.approx(-1.0, abs=1e-6)
    # Scalar grid oracle: min max(x, 0) + x^2 has its minimizer at 0.
    grid = np.linspace(-1, 1, 200001)
    assert grid[np.argmin(np.maximum(grid, 0) + grid**2)] == pytest.approx(0.0, abs=1e-5)
    x = local_update(prosumer([0.0], 1.0, 0.0), [0.0], bundle(([0.0], 1.0)), 0.5)
    # Degenerate kink: complementarity tol eps only pins x to about sqrt(eps).
    assert x[0] == pytest.approx(0.0, abs=1e-4)
    assert max(x[0], 0.0) + x[0] ** 2 <= 1e-8


def test_local_update_matches_grid_oracle():
    T = 4
    P = np.array([1.5, -2.0, 0.5, -0.7])
    p = prosumer(P, 0.25, 0.10, cap=3.0, soc0=1.0, pmax=2.0, dt=1.0)
    x_prev = np.array([0.2, -0.1, 0.0, 0.3])
    r1, r2 = np.array([0.4, -0.3, 0.8, 0.1]), np.array([-0.2, 0.5, 0.1, -0.6])
    a1, a2, rho = 1.0, 0.5, 0.8

    def f(X):
        net = P + X
        bill = np.where(net >= 0, 0.25 * net, 0.10 * net).sum(axis=1)
        pen = ((r1 + a1 * (X - x_prev)) ** 2).sum(axis=1) + ((r2 + a2 * (X - x_prev)) ** 2).sum(axis=1)
        return bill + pen / (2 * rho)

    def feasible(X):
        soc = 1.0 + np.cumsum(X, axis=1)
        return np.all((soc >= 0) & (soc <= 3.0), axis=1)

    oracle = grid_search(f, feasible, np.full(T, -2.0), np.full(T, 2.0))
    x = local_update(p, x_prev, bundle((r1, a1), (r2, a2)), rho)
    np.testing.assert_allclose(x, oracle, atol=1e-3)
    assert f(x[None])[0] <= f(oracle[None])[0] + 1e-9


def _random_agent(rng, T):
    cap = rng.uniform(2, 10)
    p = Prosumer(
        LEAF, Battery(cap, rng.uniform(0, cap), rng.uniform(0, 4), rng.uniform(0, 4), 0.5),
        rng.normal(0, 2, T), 0.25, 0.10,
    )
    refs = bundle(*[(rng.normal(0, 1, T), rng.choice([1.0, rng.uniform(0.002, 0.01)])) for _ in range(rng.integers(1, 4))])
    return p, refs


def test_output_feasible_and_deterministic():
    rng = np.random.default_rng(3)
    for _ in range(40):
        p, refs = _random_agent(rng, 12)
        x = local_update(p, np.zeros(12), refs, rng.uniform(0.1, 3))
        assert p.battery.is_feasible(x, atol=1e-6)
        y = local_update(p, np.zeros(12), refs, 1.0)
        z = local_update(p, np.zeros(12), refs, 1.0)
        assert np.array_equal(y, z)


def test_batched_matches_dense():
    rng = np.random.default_rng(4)
    T = 24
    agents = [_random_agent(rng, T) for _ in range(12)]
    prosumers = [a for a, _ in agents]
    bundles = [r for _, r in agents]
    x_prev = np.zeros((12, T))
    xb = local_update_batch(prosumers, x_prev, bundles, 1.0)
    for i, (p, refs) in enumerate(agents):
        xd = local_update(p, x_prev[i], refs, 1.0)
        np.testing.assert_allclose(xb[i], xd, atol=1e-4)
        assert p.battery.is_feasible(xb[i], atol=1e-6)


def test_rho_limits():
    P = np.array([2.0, -1.5, 1.0, -0.5])
    p = prosumer(P, 0.25, 0.10, cap=4.0, soc0=2.0, pmax=1.0)
    zero = bundle((np.zeros(4), 1.0))
    # Large rho: the bill dominates, so the private optimum cost is reached.
    private = local_update(p, np.zeros(4), zero, 1e6)
    grid = grid_search(
        lambda X: np.where(P + X >= 0, 0.25 * (P + X), 0.10 * (P + X)).sum(axis=1),
        lambda X: np.all((2.0 + np.cumsum(X, 1) >= 0) & (2.0 + np.cumsum(X, 1) <= 4.0), axis=1),
        np.full(4, -1.0), np.full(4, 1.0),
    )
    assert cost(p, private) == pytest.approx(cost(p, grid), abs=1e-4)
    # Small rho: the penalty dominates and x follows x_prev - r / a.
    x_prev = np.array([0.1, 0.2, -0.1, 0.0])
    r = np.array([0.05, -0.05, 0.02, 0.0])
    x = local_update(p, x_prev, bundle((r, 1.0)), 1e-7)
    np.testing.assert_allclose(x, x_prev - r, atol=1e-5)
    # In between, the bill improves monotonically as rho grows.
    bills = [cost(p, local_update(p, x_prev, bundle((r, 1.0)), rho)) for rho in (1e-3, 1e-1, 10.0, 1e3)]
    assert all(b1 >= b2 - 1e-6 for b1, b2 in zip(bills, bills[1:]))


def test_uncoupled_agent_breaks_ties_at_zero():
    p = prosumer([1.0, 1.0], 0.2, 0.2, cap=10, soc0=5, pmax=1)
    x = local_update(p, np.ones(2), bundle((np.zeros(2), 0.0)), 1.0)
    np.testing.assert_allclose(x, [-1.0, -1.0], atol=1e-4)  # strict price gain dominates
    flat = prosumer([1.0, 1.0], 0.0, 0.0, cap=10, soc0=5, pmax=1)
    np.testing.assert_allclose(local_update(flat, np.ones(2), ReferenceBundle(), 1.0), 0.0, atol=1e-5)


profile = st.lists(st.floats(-5, 5), min_size=6, max_size=6).map(np.array)


@settings(max_examples=200, deadline=None)
@given(profile, profile, profile, st.floats(0, 1), st.floats(0, 1))
def test_cost_midpoint_convex(P, x, y, ps, gap):
    p = prosumer(P, ps + gap, ps)
    mid = cost(p, (x + y) / 2)
    assert mid <= (cost(p, x) + cost(p, y)) / 2 + 1e-9
