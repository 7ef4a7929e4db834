"""Hierarchical ADMM coordination of battery prosumers on aggregation trees."""

from .agent import Battery, InfeasibleError, Prosumer, ReferenceBundle, SolverError, cost, local_update
from .coordinator import HierarchicalADMM, SolveReport, SolverConfig, run
from .grid import CouplingConstraint, SensitivityModel, aggregate, power_constraint, voltage_constraint
from .oracle import MonolithicSolver, OracleInfeasible, solve_monolithic
from .prox import RootObjective, project_branch, prox_tracking
from .scenario import GeneratorParams, Scenario, ScenarioError, example_case, generate, load, save
from .tree import ROOT, Tree, TreeError

__version__ = "0.1.0"

__all__ = [
    "Battery", "CouplingConstraint", "GeneratorParams", "HierarchicalADMM", "InfeasibleError",
    "MonolithicSolver", "OracleInfeasible", "Prosumer", "ROOT", "ReferenceBundle", "RootObjective",
    "Scenario", "ScenarioError", "SensitivityModel", "SolveReport", "SolverConfig", "SolverError", "Tree",
    "TreeError", "aggregate", "cost", "example_case", "generate", "load", "local_update", "power_constraint",
    "project_branch", "prox_tracking", "run", "save", "solve_monolithic", "voltage_constraint",
]
