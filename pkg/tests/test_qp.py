import numpy as np
import pytest

from helpers import dual_projected_gradient, random_qp
from hieradmm import qp
from hieradmm.qp import QPStatus, QuadraticProgram, kkt_residuals


def test_active_bound():
    r = qp.solve(QuadraticProgram([[2.0]], [0.0], [[1.0]], [1.0], [np.inf]))
    assert r.ok
    assert r.x[0] == pytest.approx(1.0, abs=1e-6)
    assert r.multipliers[0] == pytest.approx(-2.0, abs=1e-5)


def test_unconstrained():
    r = qp.solve(QuadraticProgram([[2.0]], [-4.0]))
    assert r.ok
    assert r.x[0] == pytest.approx(2.0, abs=1e-8)


def test_box_qp_matches_projected_gradient():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(5, 5))
    H = M.T @ M + np.eye(5)
    g = rng.normal(size=5) * 4
    lo, hi = -np.ones(5), np.ones(5)
    z = np.zeros(5)
    step = 1 / np.linalg.eigvalsh(H).max()
    for _ in range(50000):
        z = np.clip(z - step * (H @ z + g), lo, hi)
    r = qp.solve(QuadraticProgram(H, g, np.eye(5), lo, hi))
    np.testing.assert_allclose(r.x, z, atol=1e-4)


def test_random_qps_kkt_and_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        P = random_qp(rng)
        r = qp.solve(P, tol=1e-6)
        assert r.ok
        res = kkt_residuals(P, r.x, r.multipliers)
        assert max(res.values()) <= 1e-6, res
        assert P.objective(r.x) == pytest.approx(dual_projected_gradient(P), abs=1e-4)


def test_psd_qps_kkt():
    rng = np.random.default_rng(7)
    for _ in range(30):
        P = random_qp(rng, strict=False)
        r = qp.solve(P, tol=1e-6)
        assert r.ok
        assert max(kkt_residuals(P, r.x, r.multipliers).values()) <= 1e-6


def test_merit_non_increasing():
    rng = np.random.default_rng(11)
    for _ in range(50):
        h = np.array(qp.solve(random_qp(rng)).merit_history)
        assert np.all(np.diff(h) <= 1e-12 * (1 + h[:-1]))


def test_infeasible_status():
    P = QuadraticProgram([[1.0]], [0.0], [[1.0], [1.0]], [1.0, -np.inf], [np.inf, 0.0])
    assert qp.solve(P).status is QPStatus.INFEASIBLE


def test_unbounded_status():
    P = QuadraticProgram([[0.0]], [1.0])
    assert qp.solve(P).status is QPStatus.UNBOUNDED


def test_max_iter_keeps_iterate():
    rng = np.random.default_rng(3)
    P = random_qp(rng)
    r = qp.solve(P, max_iter=1)
    assert r.status is QPStatus.MAX_ITER
    assert r.x.shape == (P.n,)


def test_validation():
    with pytest.raises(ValueError, match="positive semidefinite"):
        QuadraticProgram([[-1.0]], [0.0])
    with pytest.raises(ValueError, match="symmetric"):
        QuadraticProgram([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0])
    with pytest.raises(ValueError, match="lb"):
        QuadraticProgram([[1.0]], [0.0], [[1.0]], [2.0], [1.0])
    with pytest.raises(ValueError):
        qp.solve(QuadraticProgram([[1.0]], [0.0]), tol=0)


def test_deterministic():
    P = random_qp(np.random.default_rng(9))
    a, b = qp.solve(P), qp.solve(P)
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations
