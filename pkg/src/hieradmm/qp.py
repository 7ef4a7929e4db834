"""Small dense convex QP solver.

Solves::

    minimize    0.5 z'Hz + g'z
    subject to  lb <= A z <= ub

with a primal-dual interior-point method (Mehrotra predictor-corrector).
Rows with ``lb == ub`` are handled as equalities; infinite bounds drop the
corresponding side.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

REGULARIZATION = 1e-8
STALL_ITERATIONS = 30


class QPStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


class QPError(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class QuadraticProgram:
    H: np.ndarray
    g: np.ndarray
    A: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.g = np.asarray(self.g, dtype=float).reshape(n)
        if self.A is None:
            self.A = np.zeros((0, n))
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.lb = np.full(m, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(m)
        self.ub = np.full(m, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(m)
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        if not np.allclose(self.H, self.H.T, atol=1e-10 * (1 + np.abs(self.H).max())):
            raise ValueError("H must be symmetric")
        if n and np.linalg.eigvalsh(self.H).min() < -1e-9 * max(1.0, np.abs(self.H).max()):
            raise ValueError("H must be positive semidefinite")
        if np.any(self.lb > self.ub):
            raise ValueError("lb must not exceed ub")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.g @ z)


@dataclass
class QPResult:
    x: np.ndarray
    status: QPStatus
    iterations: int
    multipliers: np.ndarray
    merit_history: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status is QPStatus.OPTIMAL


def kkt_residuals(qp: QuadraticProgram, z, nu) -> dict:
    """Stationarity, primal feasibility and complementarity of ``(z, nu)``.

    ``nu`` holds one multiplier per row of ``A``: positive when the upper
    bound is active, negative for the lower bound.
    """
    z = np.asarray(z, dtype=float)
    nu = np.asarray(nu, dtype=float)
    az = qp.A @ z
    stat = qp.H @ z + qp.g + qp.A.T @ nu
    viol = np.maximum(np.maximum(az - qp.ub, qp.lb - az), 0.0)
    up_gap = np.where(np.isfinite(qp.ub), qp.ub - az, np.inf)
    lo_gap = np.where(np.isfinite(qp.lb), az - qp.lb, np.inf)
    comp = np.where(nu > 0, nu * np.minimum(up_gap, 1e300), -nu * np.minimum(lo_gap, 1e300))
    # Wrong-signed multipliers on a missing bound are a stationarity defect.
    sign_err = np.where(nu > 0, np.where(np.isfinite(qp.ub), 0.0, nu),
                        np.where(np.isfinite(qp.lb), 0.0, -nu))
    inf = lambda v: float(np.max(np.abs(v))) if v.size else 0.0
    return {
        "stationarity": inf(stat),
        "feasibility": inf(viol),
        "complementarity": max(inf(comp), inf(sign_err)),
    }


def _split_rows(qp: QuadraticProgram):
    eq = np.isfinite(qp.lb) & np.isfinite(qp.ub) & (qp.lb == qp.ub)
    up = np.isfinite(qp.ub) & ~eq
    lo = np.isfinite(qp.lb) & ~eq
    G = np.vstack([qp.A[up], -qp.A[lo]])
    h = np.concatenate([qp.ub[up], -qp.lb[lo]])
    return eq, up, lo, G, h


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def solve(qp: QuadraticProgram, tol: float = 1e-6, max_iter: int = 10000, x0=None) -> QPResult:
    """Solve ``qp`` to KKT accuracy ``tol``.

    Returns a :class:`QPResult`; the status is ``INFEASIBLE`` when the dual
    iterates diverge while the primal residual stalls, and ``MAX_ITER`` with
    the last iterate when the cap is hit.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = qp.n
    eq, up, lo, G, h = _split_rows(qp)
    Aeq, beq = qp.A[eq], qp.ub[eq]
    p, q = G.shape[0], Aeq.shape[0]
    H = qp.H
    # Regularize the Newton matrix only, so the fixed point is the exact KKT point.
    H_reg = qp.H + REGULARIZATION * np.eye(n)

    z = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    s = np.maximum(h - G @ z, 1.0)
    lam = np.ones(p)
    y = np.zeros(q)
    inner_tol = 1e-2 * tol
    scale = 1.0 + max(np.abs(qp.g).max(initial=0.0), np.abs(h).max(initial=0.0), np.abs(beq).max(initial=0.0))
    merit = []
    status = QPStatus.MAX_ITER
    best = (np.inf, 0, z, s, lam, y)
    it = 0
    for it in range(1, max_iter + 1):
        r_d = H @ z + qp.g + G.T @ lam + Aeq.T @ y
        r_p = G @ z + s - h
        r_e = Aeq @ z - beq
        mu = float(s @ lam / p) if p else 0.0
        infeas = max(np.abs(r_d).max(initial=0.0), np.abs(r_p).max(initial=0.0), np.abs(r_e).max(initial=0.0))
        comp = float(np.max(s * lam)) if p else 0.0
        # Linear residuals shrink by (1 - alpha) per step and mu with them, so
        # their sum is the merit; the worst-case KKT error picks the best iterate.
        merit.append(infeas + mu)
        err = max(infeas, comp)
        if err < best[0]:
            best = (err, it, z, s, lam, y)
        if infeas <= inner_tol and comp <= inner_tol:
            status = QPStatus.OPTIMAL
            break
        if it - best[1] >= STALL_ITERATIONS and best[0] <= tol:
            # Stuck at the roundoff floor above the inner target; the best
            # iterate is judged on the actual KKT residuals below.
            break
        if np.abs(z).max(initial=0.0) > 1e10 * scale:
            status = QPStatus.UNBOUNDED
            break
        if np.abs(lam).max(initial=0.0) > 1e8 * scale and infeas > inner_tol:
            # Unbounded duals with a persistent primal residual certify (numerically)
            # an empty feasible set.
            status = QPStatus.INFEASIBLE
            break

        w = lam / s
        M = H_reg + (G.T * w) @ G
        K = np.block([[M, Aeq.T], [Aeq, -1e-13 * np.eye(q)]]) if q else M

        def newton(r_c):
            rhs = np.concatenate([-r_d - G.T @ (w * r_p + r_c / s), -r_e])
            sol = np.linalg.solve(K, rhs)
            dz, dy = sol[:n], sol[n:]
            dlam = w * (G @ dz + r_p) + r_c / s
            ds = (r_c - s * dlam) / lam
            return dz, dy, ds, dlam

        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                dz, dy, ds, dlam = newton(-s * lam)
                if p:
                    a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
                    mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam) / p)
                    sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                    # Floor the centering target near the tolerance; tiny slacks
                    # make the dual step numerically meaningless.
                    target = max(sigma * mu, 0.1 * inner_tol)
                    dz, dy, ds, dlam = newton(-s * lam + target - ds * dlam)
        except (np.linalg.LinAlgError, FloatingPointError):
            status = QPStatus.INFEASIBLE
            break
        alpha = 1.0
        if p:
            alpha = min(1.0, 0.995 * min(_max_step(s, ds), _max_step(lam, dlam)))
        z = z + alpha * dz
        y = y + alpha * dy
        s = s + alpha * ds
        lam = lam + alpha * dlam

    if status is QPStatus.MAX_ITER:
        z, s, lam, y = best[2:]
    nu = np.zeros(qp.A.shape[0])
    k_up = int(up.sum())
    nu[up] += lam[:k_up]
    nu[lo] -= lam[k_up:]
    nu[eq] += y
    if status is QPStatus.MAX_ITER and max(kkt_residuals(qp, z, nu).values()) <= tol:
        status = QPStatus.OPTIMAL
    if status is not QPStatus.OPTIMAL:
        logger.debug("QP stopped with status %s after %d iterations", status.value, it)
    return QPResult(z, status, it, nu, merit)
