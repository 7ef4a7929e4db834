"""Linear coupling constraints attached to branching nodes.

A constraint on branch ``B`` bounds the weighted aggregate
``sum_i a_i * x_i`` of the profiles of the leaves below ``B``. Unit weights
give a power cap; first-order voltage sensitivities give a linearised voltage
limit ``V0 + sum_i dV/dP_i * P_i <= Vmax``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tree import NodeId, Tree, node_label


@dataclass(frozen=True, eq=False)
class CouplingConstraint:
    """``lower <= sum_i weights[i] * x_i <= upper`` elementwise over time.

    Missing bounds are stored as infinite vectors so projection is always a
    plain clamp.
    """

    branch: NodeId
    weights: Mapping[NodeId, float]
    upper: np.ndarray
    lower: np.ndarray
    kind: str = "power"
    sensitivity: "SensitivityModel | None" = field(default=None, repr=False)

    def __post_init__(self):
        up = np.asarray(self.upper, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        if up.shape != lo.shape or up.ndim != 1:
            raise ValueError(f"constraint on {node_label(self.branch)}: bound shapes differ")
        if np.any(lo > up):
            raise ValueError(f"constraint on {node_label(self.branch)}: lower bound exceeds upper bound")
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "weights", {tuple(k): float(v) for k, v in self.weights.items()})

    @property
    def horizon(self) -> int:
        return self.upper.shape[0]

    @property
    def leaves(self) -> list[NodeId]:
        return sorted(self.weights)

    @property
    def label(self) -> str:
        return f"{node_label(self.branch)}:{self.kind}"

    def weight_vector(self, leaf_order) -> np.ndarray:
        """Weights aligned with ``leaf_order``; leaves outside the branch get 0."""
        return np.array([self.weights.get(leaf, 0.0) for leaf in leaf_order])

    def shifted(self, offset: np.ndarray) -> "CouplingConstraint":
        """Same constraint with both bounds moved down by ``offset``."""
        return CouplingConstraint(
            self.branch, self.weights, self.upper - offset, self.lower - offset,
            self.kind, self.sensitivity,
        )

    def check_tree(self, tree: Tree) -> None:
        expected = set(tree.leaf_descendants(self.branch))
        if set(self.weights) != expected:
            raise ValueError(
                f"constraint {self.label}: weights must cover exactly the leaves below the branch"
            )


@dataclass(frozen=True)
class SensitivityModel:
    """First-order voltage model at one branching node.

    Voltages are per-unit; ``grad_p``/``grad_q`` are pu per kW (kvar).
    """

    v0: float
    vmax: float
    grad_p: Mapping[NodeId, float]
    vmin: float | None = None
    grad_q: Mapping[NodeId, float] | None = None

    def __post_init__(self):
        if self.vmax < self.v0 or (self.vmin is not None and self.vmin > self.v0):
            raise ValueError("voltage limits must bracket the reference voltage")

    def effective_weights(self, leaves, power_factor: Mapping[NodeId, float] | None = None):
        """``grad_p + tan(phi) * grad_q`` per leaf, for a fixed power factor."""
        out = {}
        for leaf in leaves:
            if leaf not in self.grad_p:
                raise ValueError(f"no voltage sensitivity for leaf {node_label(leaf)}")
            w = self.grad_p[leaf]
            pf = (power_factor or {}).get(leaf)
            if pf is not None and self.grad_q is not None and leaf in self.grad_q:
                w += math.tan(math.acos(pf)) * self.grad_q[leaf]
            out[leaf] = float(w)
        return out


def aggregate(constraint: CouplingConstraint, x: Mapping[NodeId, np.ndarray]) -> np.ndarray:
    """Weighted sum of leaf profiles, i.e. one block row of the summation matrix."""
    total = np.zeros(constraint.horizon)
    for leaf, a in constraint.weights.items():
        if leaf not in x:
            raise KeyError(f"missing profile for leaf {node_label(leaf)}")
        xi = np.asarray(x[leaf], dtype=float)
        if xi.shape != total.shape:
            raise ValueError(
                f"profile of {node_label(leaf)} has length {xi.shape[0]}, expected {total.shape[0]}"
            )
        total += a * xi
    return total


def power_constraint(branch: NodeId, leaves, limit, lower=None) -> CouplingConstraint:
    limit = np.asarray(limit, dtype=float)
    lo = np.full_like(limit, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    return CouplingConstraint(branch, {leaf: 1.0 for leaf in leaves}, limit, lo, "power")


def voltage_constraint(
    branch: NodeId,
    leaves,
    model: SensitivityModel,
    horizon: int,
    power_factor: Mapping[NodeId, float] | None = None,
) -> CouplingConstraint:
    """Linearised voltage limit on ``branch`` as a coupling constraint.

    The bound is the headroom ``Vmax - V0`` (and ``Vmin - V0`` below when a
    lower limit is given), repeated over the horizon.
    """
    weights = model.effective_weights(leaves, power_factor)
    upper = np.full(horizon, model.vmax - model.v0)
    lower = np.full(horizon, -np.inf if model.vmin is None else model.vmin - model.v0)
    return CouplingConstraint(branch, weights, upper, lower, "voltage", model)
