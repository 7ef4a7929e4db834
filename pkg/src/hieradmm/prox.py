"""Proximal operators used by the branch and root updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import CouplingConstraint


@dataclass(eq=False)
class RootObjective:
    """Tracking objective ``weight * ||y - target||^2`` on the root aggregate.

    ``target`` is expressed in battery-action units: peak shaving of the net
    load ``S(x + P_u)`` uses ``target = -S P_u``.
    """

    target: np.ndarray
    weight: float = 1.0
    kind: str = "explicit"

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        if self.weight < 0:
            raise ValueError("objective weight must be non-negative")

    def __call__(self, y) -> float:
        return float(self.weight * np.sum((np.asarray(y) - self.target) ** 2))


def prox_tracking(z, rho: float, obj: RootObjective) -> np.ndarray:
    """``argmin_y w||y - target||^2 + ||y - z||^2 / (2 rho)``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    z = np.asarray(z, dtype=float)
    k = 2.0 * rho * obj.weight
    return (z + k * obj.target) / (1.0 + k)


def project_branch(constraint: CouplingConstraint, z) -> np.ndarray:
    """Euclidean projection onto the constraint's box."""
    return np.clip(np.asarray(z, dtype=float), constraint.lower, constraint.upper)
