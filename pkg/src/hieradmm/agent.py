"""Prosumer model: battery, energy bill and the local ADMM subproblem.

Sign convention: positive power is consumption, so a positive battery
action charges the battery and adds to the prosumer's net load.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp
from .battery_qp import solve_battery_qp
from .tree import NodeId, node_label

# Quadratic pull towards zero used when no coupling penalty reaches an agent.
DECOUPLED_WEIGHT = 1e-6


class InfeasibleError(ValueError):
    """An agent's private constraint set is empty."""

    def __init__(self, message, leaf=None):
        super().__init__(message)
        self.leaf = leaf


class SolverError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class Battery:
    capacity: float
    soc0: float
    p_charge_max: float
    p_discharge_max: float
    dt: float = 0.25

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.p_charge_max < 0 or self.p_discharge_max < 0:
            raise InfeasibleError("battery power limits must be non-negative")
        if not 0.0 <= self.soc0 <= self.capacity:
            raise InfeasibleError(
                f"initial state of charge {self.soc0} outside [0, {self.capacity}]"
            )

    def is_feasible(self, x, atol: float = 1e-6) -> bool:
        x = np.asarray(x, dtype=float)
        soc = soc_trajectory(self, x)
        return bool(
            np.all(x <= self.p_charge_max + atol)
            and np.all(x >= -self.p_discharge_max - atol)
            and np.all(soc >= -atol)
            and np.all(soc <= self.capacity + atol)
        )


@dataclass(frozen=True, eq=False)
class Prosumer:
    id: NodeId
    battery: Battery
    p_uncontrolled: np.ndarray
    price_buy: float
    price_sell: float
    power_factor: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "id", tuple(self.id))
        object.__setattr__(self, "p_uncontrolled", np.asarray(self.p_uncontrolled, dtype=float))
        if self.price_buy < self.price_sell:
            raise ValueError(f"prosumer {node_label(self.id)}: price_buy < price_sell makes the bill non-convex")
        if self.power_factor is not None and not 0.0 < self.power_factor <= 1.0:
            raise ValueError(f"prosumer {node_label(self.id)}: power factor must be in (0, 1]")

    @property
    def horizon(self) -> int:
        return self.p_uncontrolled.shape[0]


@dataclass
class ReferenceBundle:
    """Reference signals from every coupling constraint above one leaf.

    ``entries`` is a root-first list of ``(label, reference, weight)``.
    """

    entries: list = field(default_factory=list)

    def add(self, label, reference, weight):
        self.entries.append((label, np.asarray(reference, dtype=float), float(weight)))

    def __len__(self):
        return len(self.entries)

    def penalty_terms(self, x_prev):
        """Curvature ``sum a^2`` and center of the stacked penalty.

        ``sum_B ||r_B + a_B (x - x_prev)||^2`` equals
        ``sum a^2 * ||x - center||^2`` up to a constant.
        """
        x_prev = np.asarray(x_prev, dtype=float)
        curv = sum(a * a for _, _, a in self.entries)
        if curv == 0.0:
            return 0.0, np.zeros_like(x_prev)
        shift = sum(a * r for _, r, a in self.entries)
        return curv, x_prev - shift / curv


def cost(p: Prosumer, x) -> float:
    """Energy bill: buy at ``price_buy``, sell exports at ``price_sell``."""
    x = np.asarray(x, dtype=float)
    if x.shape != p.p_uncontrolled.shape:
        raise ValueError(f"profile length {x.shape} does not match horizon {p.p_uncontrolled.shape}")
    net = p.p_uncontrolled + x
    return float(np.sum(np.where(net >= 0, p.price_buy * net, p.price_sell * net)) * p.battery.dt)


def soc_trajectory(b: Battery, x) -> np.ndarray:
    return b.soc0 + b.dt * np.cumsum(np.asarray(x, dtype=float))


def _quadratic(curv, center, rho):
    if curv == 0.0:
        return DECOUPLED_WEIGHT, np.zeros_like(center)
    return curv / rho, center


def subproblem_qp(p: Prosumer, x_prev, refs: ReferenceBundle, rho: float) -> qp.QuadraticProgram:
    """Epigraph QP over ``[x, c]`` for one agent update."""
    T = p.horizon
    b = p.battery
    alpha, center = _quadratic(*refs.penalty_terms(x_prev), rho)
    I, Z = np.eye(T), np.zeros((T, T))
    H = np.block([[alpha * I, Z], [Z, Z]])
    g = np.concatenate([-alpha * center, np.full(T, b.dt)])
    L = b.dt * np.tril(np.ones((T, T)))
    P = p.p_uncontrolled
    A = np.vstack([
        np.hstack([I, Z]),
        np.hstack([L, Z]),
        np.hstack([p.price_buy * I, -I]),
        np.hstack([p.price_sell * I, -I]),
    ])
    lb = np.concatenate([np.full(T, -b.p_discharge_max), np.full(T, -b.soc0), np.full(2 * T, -np.inf)])
    ub = np.concatenate([
        np.full(T, b.p_charge_max), np.full(T, b.capacity - b.soc0),
        -p.price_buy * P, -p.price_sell * P,
    ])
    return qp.QuadraticProgram(H, g, A, lb, ub)


def local_update(
    p: Prosumer,
    x_prev,
    refs: ReferenceBundle,
    rho: float,
    tol: float = 1e-6,
    max_iter: int = 10000,
) -> np.ndarray:
    """Minimize bill + coupling penalty over the battery's feasible set.

    The penalty is ``1/(2 rho) * sum_B ||r_B + a_B x - a_B x_prev||^2`` with
    one term per constraint in ``refs``. Solved as a dense QP.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    x_prev = np.asarray(x_prev, dtype=float)
    if x_prev.shape != p.p_uncontrolled.shape:
        raise ValueError("x_prev length does not match the horizon")
    res = qp.solve(subproblem_qp(p, x_prev, refs, rho), tol=tol, max_iter=max_iter)
    if res.status is qp.QPStatus.INFEASIBLE:
        raise InfeasibleError(f"agent {node_label(p.id)}: subproblem infeasible", leaf=p.id)
    if not res.ok:
        raise SolverError(
            f"agent {node_label(p.id)}: QP did not converge ({res.status.value})",
            {"iterations": res.iterations, "iterate": res.x[: p.horizon], "merit": res.merit_history[-5:]},
        )
    return res.x[: p.horizon]


def local_update_batch(prosumers, x_prev, bundles, rho: float, tol: float = 1e-6) -> np.ndarray:
    """Vectorized :func:`local_update` for many agents sharing a horizon.

    Uses the structured interior-point solver; every agent's problem is
    independent, so this is the same computation as running them in parallel.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    x_prev = np.asarray(x_prev, dtype=float)
    alphas, centers = [], []
    for i, refs in enumerate(bundles):
        a, c = _quadratic(*refs.penalty_terms(x_prev[i]), rho)
        alphas.append(a)
        centers.append(c)
    b = [p.battery for p in prosumers]
    dts = {bb.dt for bb in b}
    if len(dts) != 1:
        raise ValueError("batched agents must share one time step")
    res = solve_battery_qp(
        np.array(alphas), np.array(centers),
        np.array([p.p_uncontrolled for p in prosumers]),
        [p.price_buy for p in prosumers], [p.price_sell for p in prosumers],
        [bb.p_charge_max for bb in b], [bb.p_discharge_max for bb in b],
        [bb.capacity for bb in b], [bb.soc0 for bb in b],
        dts.pop(), tol=tol,
    )
    if not res.converged.all():
        bad = [node_label(prosumers[i].id) for i in np.flatnonzero(~res.converged)]
        raise SolverError(f"agent subproblems did not converge: {', '.join(bad)}",
                          {"iterations": res.iterations, "agents": bad})
    return res.x
