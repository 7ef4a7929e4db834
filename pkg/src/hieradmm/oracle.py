"""Centralized reference solution of the coupled scheduling problem.

The whole instance is assembled as one dense epigraph QP over the stacked
actions ``x = [x_1; ...; x_N]`` and cost variables ``c``. Meant for small
instances in tests and the ``verify`` command.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import qp

logger = logging.getLogger(__name__)

DENSE_SIZE_GUIDELINE = 2000


class OracleInfeasible(ValueError):
    """The coupled problem has no feasible point.

    ``constraint_class`` is ``"power"``, ``"voltage"`` or ``"coupling"`` (only
    a combination of constraints is infeasible); ``labels`` lists the
    constraints that are infeasible on their own.
    """

    def __init__(self, message, constraint_class, labels=()):
        super().__init__(message)
        self.constraint_class = constraint_class
        self.labels = list(labels)


@dataclass
class MonolithicInstance:
    qp: qp.QuadraticProgram
    leaf_order: tuple
    horizon: int
    n_battery_rows: int
    coupling_rows: list  # (label, kind, slice)

    @property
    def n_variables(self) -> int:
        return self.qp.n


@dataclass
class MonolithicSolution:
    x: dict
    objective: float
    iterations: int


def build_instance(scenario, constraints=None) -> MonolithicInstance:
    """Assemble the dense QP; ``constraints`` defaults to all shifted couplings."""
    leaves = scenario.leaf_order
    N, T = len(leaves), scenario.horizon
    n = 2 * N * T
    obj = scenario.root_objective
    S0 = np.tile(np.eye(T), N)  # root summation over all leaves
    H = np.zeros((n, n))
    g = np.zeros(n)
    H[: N * T, : N * T] = 2.0 * obj.weight * S0.T @ S0
    g[: N * T] = -2.0 * obj.weight * S0.T @ obj.target
    g[N * T:] = scenario.dt

    rows, lbs, ubs = [], [], []
    I = np.eye(T)
    L = np.tril(np.ones((T, T)))
    for i, leaf in enumerate(leaves):
        p = scenario.prosumers[leaf]
        b = p.battery
        xs = slice(i * T, (i + 1) * T)
        cs = slice(N * T + i * T, N * T + (i + 1) * T)
        for blk_x, blk_c, lo, up in (
            (I, None, np.full(T, -b.p_discharge_max), np.full(T, b.p_charge_max)),
            (b.dt * L, None, np.full(T, -b.soc0), np.full(T, b.capacity - b.soc0)),
            (p.price_buy * I, -I, np.full(T, -np.inf), -p.price_buy * p.p_uncontrolled),
            (p.price_sell * I, -I, np.full(T, -np.inf), -p.price_sell * p.p_uncontrolled),
        ):
            R = np.zeros((T, n))
            R[:, xs] = blk_x
            if blk_c is not None:
                R[:, cs] = blk_c
            rows.append(R)
            lbs.append(lo)
            ubs.append(up)
    n_battery = sum(r.shape[0] for r in rows)
    coupling = []
    start = n_battery
    for c in scenario.solver_constraints() if constraints is None else constraints:
        keep = np.isfinite(c.upper) | np.isfinite(c.lower)
        if not keep.any():
            continue
        R = np.zeros((T, n))
        for i, leaf in enumerate(leaves):
            a = c.weights.get(leaf, 0.0)
            if a:
                R[:, i * T:(i + 1) * T] = a * I
        rows.append(R[keep])
        lbs.append(c.lower[keep])
        ubs.append(c.upper[keep])
        k = int(keep.sum())
        coupling.append((c.label, c.kind, slice(start, start + k)))
        start += k
    A = np.vstack(rows)
    problem = qp.QuadraticProgram(H, g, A, np.concatenate(lbs), np.concatenate(ubs))
    return MonolithicInstance(problem, leaves, T, n_battery, coupling)


def _diagnose_infeasible(scenario, tol):
    alone = []
    for c in scenario.solver_constraints():
        inst = build_instance(scenario, [c])
        if qp.solve(inst.qp, tol=tol).status is qp.QPStatus.INFEASIBLE:
            alone.append(c)
    kinds = sorted({c.kind for c in alone})
    cls = kinds[0] if len(kinds) == 1 else "coupling"
    labels = [c.label for c in alone]
    if alone:
        msg = f"{cls} constraint infeasible with the battery limits: {', '.join(labels)}"
    else:
        msg = "coupling constraints are jointly infeasible with the battery limits"
    return OracleInfeasible(msg, cls, labels)


def solve_monolithic(scenario, tol: float = 1e-6, max_iter: int = 10000) -> MonolithicSolution:
    """Optimal schedule of the centralized problem and its objective value.

    Raises :class:`OracleInfeasible` when the coupling constraints cannot be
    met, and :class:`~hieradmm.qp.QPError` if the QP solver fails otherwise.
    """
    N, T = scenario.n_agents, scenario.horizon
    if N * T > DENSE_SIZE_GUIDELINE:
        logger.warning("dense oracle on %d variables; expect slow solves", 2 * N * T)
    inst = build_instance(scenario)
    res = qp.solve(inst.qp, tol=tol, max_iter=max_iter)
    if res.status is qp.QPStatus.INFEASIBLE:
        raise _diagnose_infeasible(scenario, tol)
    if not res.ok:
        raise qp.QPError(f"monolithic QP stopped with status {res.status.value}", res)
    x = {leaf: res.x[i * T:(i + 1) * T].copy() for i, leaf in enumerate(inst.leaf_order)}
    return MonolithicSolution(x, scenario.objective(x), res.iterations)


class MonolithicSolver(BaseEstimator):
    """Estimator wrapper around :func:`solve_monolithic`."""

    def __init__(self, tol=1e-6, max_iter=10000):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, scenario, y=None):
        sol = solve_monolithic(scenario, self.tol, self.max_iter)
        self.x_ = sol.x
        self.objective_ = sol.objective
        self.n_iter_ = sol.iterations
        return self

