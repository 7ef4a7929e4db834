"""Batched interior-point solver for battery scheduling subproblems.

Each problem in the batch is::

    minimize    alpha/2 ||x - center||^2 + dt * sum(c)
    subject to  -p_discharge <= x <= p_charge
                0 <= soc0 + dt * cumsum(x) <= capacity
                c >= price_buy * (p_unc + x)
                c >= price_sell * (p_unc + x)

which is the epigraph form of a piecewise-linear energy bill plus a
quadratic penalty. In state-of-charge coordinates the Newton system is
tridiagonal with the special form ``(I - S') D (I - S) + E``; it is factored
with a pivot recursion that only adds positive quantities, which stays
accurate when barrier weights span twenty orders of magnitude. Cost per
iteration is linear in ``N * T`` and vectorized over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

_REG = 1e-10


@dataclass
class BatteryQPResult:
    x: np.ndarray
    iterations: int
    converged: np.ndarray


def _cumsum(v, dt):
    return dt * np.cumsum(v, axis=-1)


def _rcumsum(v, dt):
    return dt * np.cumsum(v[..., ::-1], axis=-1)[..., ::-1]


@numba.njit(cache=True)
def _factor(d, e):
    N, T = d.shape
    piv = np.empty_like(d)
    mult = np.empty_like(d)
    for n in range(N):
        q = d[n, 0] + e[n, 0]
        for t in range(T):
            if t > 0:
                q = e[n, t] + d[n, t] * q / (d[n, t] + q)
            dn = d[n, t + 1] if t + 1 < T else 0.0
            piv[n, t] = dn + q
            mult[n, t] = dn / piv[n, t]
    return piv, mult


@numba.njit(cache=True)
def _substitute(piv, mult, rhs):
    N, T = rhs.shape
    w = np.empty_like(rhs)
    for n in range(N):
        z = rhs[n, 0]
        w[n, 0] = z
        for t in range(1, T):
            z = rhs[n, t] + mult[n, t - 1] * z
            w[n, t] = z
        w[n, T - 1] /= piv[n, T - 1]
        for t in range(T - 2, -1, -1):
            w[n, t] = w[n, t] / piv[n, t] + mult[n, t] * w[n, t + 1]
    return w


class _Tridiag:
    """LDL' factorization of ``K = (I - S') diag(d) (I - S) + diag(e)``.

    ``S`` is the down-shift, so ``K[t, t] = d[t] + d[t+1] + e[t]`` and
    ``K[t, t+1] = -d[t+1]`` with ``d[T] = 0``. Pivots are ``d[t+1] + q[t]``
    where ``q`` obeys a series-combination recursion free of subtraction.
    """

    def __init__(self, d, e):
        self.piv, self.mult = _factor(np.ascontiguousarray(d), np.ascontiguousarray(e))

    def solve(self, rhs):
        return _substitute(self.piv, self.mult, np.ascontiguousarray(rhs))


def _ratio(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(dv < 0, -v / dv, np.inf)
    return r.min(axis=(0, 2))


def solve_battery_qp(
    alpha,
    center,
    p_unc,
    price_buy,
    price_sell,
    p_charge,
    p_discharge,
    capacity,
    soc0,
    dt: float,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> BatteryQPResult:
    """Solve a batch of battery subproblems.

    Array arguments broadcast to ``(N, T)`` (profiles) or ``(N,)``
    (per-battery scalars). ``alpha`` must be positive.
    """
    center = np.atleast_2d(np.asarray(center, dtype=float))
    N, T = center.shape
    col = lambda v: np.broadcast_to(np.asarray(v, dtype=float).reshape(-1, 1), (N, 1)).copy()
    alpha, pb, ps = col(alpha), col(price_buy), col(price_sell)
    cap, s0 = col(capacity), col(soc0)
    pc = np.broadcast_to(np.asarray(p_charge, dtype=float).reshape(N, -1), (N, T)).copy()
    pd = np.broadcast_to(np.asarray(p_discharge, dtype=float).reshape(N, -1), (N, T)).copy()
    P = np.broadcast_to(np.asarray(p_unc, dtype=float), (N, T))
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")

    # Batteries that cannot move: the only feasible schedule is zero.
    frozen = ((pc + pd).max(axis=1) <= 0) | (cap[:, 0] <= 0)
    if frozen.any():
        x = np.zeros((N, T))
        done = np.ones(N, dtype=bool)
        it = 0
        live = ~frozen
        if live.any():
            sub = solve_battery_qp(
                alpha[live], center[live], P[live], pb[live], ps[live], pc[live], pd[live],
                cap[live], s0[live], dt, tol, max_iter,
            )
            x[live], done[live], it = sub.x, sub.converged, sub.iterations
        return BatteryQPResult(x, it, done)

    # Row groups stacked on the first axis: shape (6, N, T).
    h = np.stack([pc, pd, np.broadcast_to(cap - s0, (N, T)), np.broadcast_to(s0, (N, T)), -pb * P, -ps * P])
    price = np.stack([pb, ps])

    def G(x, c):
        out = np.empty((6, N, T))
        ux = _cumsum(x, dt)
        out[0], out[1], out[2], out[3] = x, -x, ux, -ux
        out[4:] = price * x - c
        return out

    def GT(v):
        gx = v[0] - v[1] + _rcumsum(v[2] - v[3], dt) + (price * v[4:]).sum(axis=0)
        gc = -v[4] - v[5]
        return gx, gc

    def step(ds, dlam):
        return np.minimum(np.minimum(_ratio(s, ds), _ratio(lam, dlam)), 1.0)

    x = np.zeros((N, T))
    c = np.maximum(pb * P, ps * P) + 1.0
    s = np.maximum(h - G(x, c), 1.0)
    lam = np.ones((6, N, T))
    n_rows = 6 * T
    inner = 1e-2 * tol
    done = np.zeros(N, dtype=bool)
    best_merit = np.full(N, np.inf)
    best_x = x.copy()
    it = 0
    for it in range(1, max_iter + 1):
        r_p = G(x, c) + s - h
        gtx, gtc = GT(lam)
        r_dx = alpha * (x - center) + gtx
        r_dc = dt + gtc
        comp = s * lam
        mu = comp.sum(axis=(0, 2)) / n_rows
        infeas = np.maximum.reduce([np.abs(r_dx).max(axis=1), np.abs(r_dc).max(axis=1),
                                    np.abs(r_p).max(axis=(0, 2))])
        merit = np.maximum(infeas, comp.max(axis=(0, 2)))
        better = merit < best_merit
        best_merit = np.where(better, merit, best_merit)
        best_x[better] = x[better]
        done |= merit <= inner
        if done.all():
            break

        W = lam / s
        Bxc = -pb * W[4] - ps * W[5]
        Cc = W[4] + W[5]
        # Schur complement of the epigraph block, in cancellation-free form.
        Dp = alpha + W[0] + W[1] + W[4] * W[5] * (pb - ps) ** 2 / Cc + _REG
        K = _Tridiag(Dp / dt**2, W[2] + W[3])

        def newton(r_c):
            vx, vc = GT(W * r_p + r_c / s)
            bx, bc = -r_dx - vx, -r_dc - vc
            bp = bx - Bxc * bc / Cc
            rhs = bp.copy()
            rhs[:, :-1] -= bp[:, 1:]
            dsig = K.solve(rhs / dt)
            dx = dsig.copy()
            dx[:, 1:] -= dsig[:, :-1]
            dx /= dt
            dc = (bc - Bxc * dx) / Cc
            dlam = W * (G(dx, dc) + r_p) + r_c / s
            ds = (r_c - s * dlam) / lam
            return dx, dc, ds, dlam

        dx, dc, ds, dlam = newton(-comp)
        a_aff = step(ds, dlam)[:, None]
        mu_aff = ((s + a_aff * ds) * (lam + a_aff * dlam)).sum(axis=(0, 2)) / n_rows
        sigma = np.where(mu > 0, (mu_aff / np.where(mu > 0, mu, 1.0)) ** 3, 0.0)[:, None]
        # Centering target never drops below the tolerance floor: driving slacks
        # to 1e-20 only destroys the accuracy of the dual step.
        target = np.maximum(sigma * mu[:, None], 0.1 * inner)
        dx, dc, ds, dlam = newton(-comp + target - ds * dlam)
        a = np.minimum(0.995 * step(ds, dlam), 1.0)
        a = np.where(done, 0.0, a)[:, None]
        x = x + a * dx
        c = c + a * dc
        s = s + a * ds
        lam = lam + a * dlam

    done |= best_merit <= tol
    return BatteryQPResult(best_x, it, done)
