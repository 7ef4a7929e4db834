"""Problem instances: container, JSON file format and random generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .agent import Battery, Prosumer, cost
from .battery_qp import solve_battery_qp
from .grid import CouplingConstraint, SensitivityModel, aggregate, power_constraint, voltage_constraint
from .prox import RootObjective
from .tree import ROOT, NodeId, Tree, node_label, parse_label

FORMAT_VERSION = 1


class ScenarioError(ValueError):
    """Invalid scenario file or instance. ``path`` locates the bad field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(eq=False)
class Scenario:
    tree: Tree
    horizon: int
    dt: float
    prosumers: dict
    constraints: list
    root_objective: RootObjective
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prosumers = {tuple(k): v for k, v in self.prosumers.items()}
        leaves = self.tree.leaves()
        for leaf in sorted(leaves):
            if leaf not in self.prosumers:
                raise ScenarioError(f"leaf {node_label(leaf)} has no prosumer", "prosumers")
        for k in self.prosumers:
            if k not in leaves:
                raise ScenarioError(f"prosumer {node_label(k)} is not a leaf of the tree", "prosumers")
        for k, p in self.prosumers.items():
            if p.horizon != self.horizon:
                raise ScenarioError(f"profile of {node_label(k)} has length {p.horizon}, expected {self.horizon}",
                                    f"prosumers.{node_label(k)}.p_uncontrolled")
            if p.battery.dt != self.dt:
                raise ScenarioError(f"battery of {node_label(k)} uses a different time step", "dt_hours")
        branches = self.tree.branching_nodes()
        for j, c in enumerate(self.constraints):
            if c.branch not in branches:
                raise ScenarioError(f"constraint branch {node_label(c.branch)} is not a branching node",
                                    f"constraints[{j}].branch")
            try:
                c.check_tree(self.tree)
            except ValueError as exc:
                raise ScenarioError(str(exc), f"constraints[{j}].weights") from None
            if c.horizon != self.horizon:
                raise ScenarioError("bound length does not match horizon", f"constraints[{j}]")
        if self.root_objective.target.shape != (self.horizon,):
            raise ScenarioError("objective target length does not match horizon", "root_objective.target")

    @property
    def leaf_order(self) -> tuple:
        return self.tree.leaf_order

    @property
    def n_agents(self) -> int:
        return len(self.prosumers)

    def uncontrolled(self) -> dict:
        return {k: p.p_uncontrolled for k, p in self.prosumers.items()}

    def root_aggregate_uncontrolled(self) -> np.ndarray:
        return np.sum([p.p_uncontrolled for p in self.prosumers.values()], axis=0)

    def objective(self, x: dict) -> float:
        """System objective plus every agent's bill at schedule ``x``."""
        total = sum(cost(p, x[k]) for k, p in self.prosumers.items())
        root = np.sum([x[k] for k in self.prosumers], axis=0)
        return float(total + self.root_objective(root))

    def zero_schedule(self) -> dict:
        return {k: np.zeros(self.horizon) for k in self.prosumers}

    def no_action_objective(self) -> float:
        return self.objective(self.zero_schedule())

    def solver_constraints(self) -> list:
        """Constraints on battery actions: bounds shifted by the uncontrolled aggregate."""
        unc = self.uncontrolled()
        return [c.shifted(aggregate(c, unc)) for c in self.constraints]

    def constraint_violation(self, x: dict) -> float:
        """Largest elementwise violation over all coupling constraints at ``x``."""
        worst = 0.0
        for c in self.solver_constraints():
            s = aggregate(c, x)
            worst = max(worst, float(np.max(np.maximum(s - c.upper, c.lower - s), initial=0.0)))
        return worst

    def battery_violation(self, x: dict) -> float:
        worst = 0.0
        for k, p in self.prosumers.items():
            b = p.battery
            xi = np.asarray(x[k])
            soc = b.soc0 + b.dt * np.cumsum(xi)
            worst = max(worst, float(np.max(np.concatenate([
                xi - b.p_charge_max, -b.p_discharge_max - xi, soc - b.capacity, -soc,
            ]))))
        return max(worst, 0.0)

    def summary(self) -> dict:
        depth = self.tree.depth
        return {
            "levels": depth + 1,
            "branching_nodes": len(self.tree.branching_nodes()),
            "leaves": self.n_agents,
            "constraints": len(self.constraints),
            "horizon": self.horizon,
            "dt_hours": self.dt,
        }

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        nodes = sorted(self.tree.nodes, key=lambda n: (len(n), n))
        tree = [{"id": list(n), "parent": None if n == ROOT else list(self.tree.parent(n))} for n in nodes]
        prosumers = []
        for k in self.leaf_order:
            p = self.prosumers[k]
            b = p.battery
            d = {
                "id": list(k),
                "capacity_kwh": b.capacity,
                "soc0_kwh": b.soc0,
                "p_charge_max_kw": b.p_charge_max,
                "p_discharge_max_kw": b.p_discharge_max,
                "price_buy": p.price_buy,
                "price_sell": p.price_sell,
                "p_uncontrolled": [float(v) for v in p.p_uncontrolled],
            }
            if p.power_factor is not None:
                d["power_factor"] = p.power_factor
            prosumers.append(d)
        obj = self.root_objective
        return {
            "version": FORMAT_VERSION,
            "horizon": self.horizon,
            "dt_hours": self.dt,
            "tree": tree,
            "prosumers": prosumers,
            "constraints": [_constraint_to_dict(c) for c in self.constraints],
            "root_objective": {
                "target": "peak_shaving" if obj.kind == "peak_shaving" else [float(v) for v in obj.target],
                "weight": obj.weight,
            },
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        validate_document(doc)
        T = doc["horizon"]
        dt = float(doc["dt_hours"])
        tree = Tree(tuple(n["id"]) for n in doc["tree"])
        for i, n in enumerate(doc["tree"]):
            expected = tree.parent(tuple(n["id"]))
            given = None if n["parent"] is None else tuple(n["parent"])
            if given != expected:
                raise ScenarioError(f"parent of {node_label(tuple(n['id']))} must be "
                                    f"{None if expected is None else node_label(expected)}", f"tree[{i}].parent")
        prosumers = {}
        for i, d in enumerate(doc["prosumers"]):
            path = f"prosumers[{i}]"
            k = tuple(d["id"])
            if k in prosumers:
                raise ScenarioError(f"duplicate prosumer {node_label(k)}", path)
            if len(d["p_uncontrolled"]) != T:
                raise ScenarioError(f"expected {T} values", path + ".p_uncontrolled")
            try:
                prosumers[k] = Prosumer(
                    k,
                    Battery(d["capacity_kwh"], d["soc0_kwh"], d["p_charge_max_kw"], d["p_discharge_max_kw"], dt),
                    np.array(d["p_uncontrolled"], dtype=float),
                    d["price_buy"],
                    d["price_sell"],
                    d.get("power_factor"),
                )
            except ValueError as exc:
                raise ScenarioError(str(exc), path) from None
        pf = {k: p.power_factor for k, p in prosumers.items() if p.power_factor is not None}
        constraints = []
        for j, d in enumerate(doc["constraints"]):
            path = f"constraints[{j}]"
            branch = tuple(d["branch"])
            if branch not in tree:
                raise ScenarioError(f"unknown branch {node_label(branch)}", path + ".branch")
            if tree.is_leaf(branch):
                raise ScenarioError(f"{node_label(branch)} is a leaf, not a branching node", path + ".branch")
            leaves = tree.leaf_descendants(branch)
            try:
                constraints.append(_constraint_from_dict(d, branch, leaves, T, pf))
            except (ValueError, KeyError) as exc:
                raise ScenarioError(str(exc), path) from None
        ro = doc["root_objective"]
        weight = float(ro.get("weight", 1.0))
        if ro["target"] == "peak_shaving":
            unc = np.sum([p.p_uncontrolled for p in prosumers.values()], axis=0)
            objective = RootObjective(-unc, weight, "peak_shaving")
        else:
            if len(ro["target"]) != T:
                raise ScenarioError(f"expected {T} values", "root_objective.target")
            objective = RootObjective(np.array(ro["target"], dtype=float), weight)
        return cls(tree, T, dt, prosumers, constraints, objective, dict(doc.get("metadata", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"


def _vector_or_scalar(v):
    if v is None:
        return None
    arr = np.asarray(v, dtype=float)
    if np.all(arr == arr.flat[0]):
        return float(arr.flat[0])
    return [float(a) for a in arr]


def _bound(v, T, default):
    if v is None:
        return np.full(T, default)
    if isinstance(v, (int, float)):
        return np.full(T, float(v))
    if len(v) != T:
        raise ValueError(f"bound has {len(v)} values, expected {T}")
    return np.array(v, dtype=float)


def _constraint_to_dict(c: CouplingConstraint) -> dict:
    d = {"branch": list(c.branch), "kind": c.kind}
    if c.kind == "voltage" and c.sensitivity is not None:
        m = c.sensitivity
        block = {"v0": m.v0, "vmax": m.vmax, "grad_p": {node_label(k): v for k, v in sorted(m.grad_p.items())}}
        if m.vmin is not None:
            block["vmin"] = m.vmin
        if m.grad_q is not None:
            block["grad_q"] = {node_label(k): v for k, v in sorted(m.grad_q.items())}
        d["sensitivity"] = block
        return d
    d["weights"] = {node_label(k): v for k, v in sorted(c.weights.items())}
    d["upper"] = None if np.all(np.isinf(c.upper)) else _vector_or_scalar(c.upper)
    d["lower"] = None if np.all(np.isinf(c.lower)) else _vector_or_scalar(c.lower)
    return d


def _constraint_from_dict(d, branch, leaves, T, power_factor) -> CouplingConstraint:
    if d["kind"] == "voltage":
        s = d["sensitivity"]
        model = SensitivityModel(
            s["v0"], s["vmax"], {parse_label(k): v for k, v in s["grad_p"].items()},
            s.get("vmin"), {parse_label(k): v for k, v in s["grad_q"].items()} if "grad_q" in s else None,
        )
        return voltage_constraint(branch, leaves, model, T, power_factor)
    weights = d.get("weights")
    if weights is None:
        weights = {leaf: 1.0 for leaf in leaves}
    else:
        weights = {parse_label(k): float(v) for k, v in weights.items()}
        missing = set(leaves) - set(weights)
        if missing:
            raise ValueError(f"no weight for leaf {node_label(sorted(missing)[0])}")
    return CouplingConstraint(
        branch, weights, _bound(d.get("upper"), T, np.inf), _bound(d.get("lower"), T, -np.inf), d["kind"],
    )


def schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("scenario.schema.json").read_text())


def validate_document(doc: dict) -> None:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path)
        raise ScenarioError(exc.message, path or "<document>") from None


def save(scenario: Scenario, path) -> None:
    Path(path).write_text(scenario.dumps())


def load(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return Scenario.from_dict(doc)


# -- random generation ---------------------------------------------------


@dataclass
class GeneratorParams:
    """Ranges for the randomized scenario study.

    ``levels`` counts node levels including the leaves, so ``levels=2`` is a
    single aggregator above its prosumers and ``levels=5`` has four
    aggregator levels.
    """

    levels: int = 3
    seed: int = 0
    min_branch_children: int = 0
    max_branch_children: int = 2
    min_leaves_per_branch: int = 1
    max_leaves_per_branch: int = 10
    horizon: int = 96
    dt: float = 0.25
    base_load_kw: tuple = (0.2, 2.0)
    pv_peak_kw: tuple = (0.0, 3.0)
    noise_kw: float = 0.05
    capacity_kwh: tuple = (5.0, 15.0)
    power_kw: tuple = (2.0, 5.0)
    soc0_fraction: tuple = (0.2, 0.8)
    price_buy: float = 0.25
    price_sell: float = 0.10
    grad_p: tuple = (0.002, 0.01)
    v0: float = 1.0
    vmax: float = 1.05
    vmin: float = 0.95
    cap_fraction: tuple = (0.4, 0.8)
    voltage_probability: float = 0.5
    objective_weight: float = 1.0

    def __post_init__(self):
        if not 2 <= self.levels <= 5:
            raise ValueError(f"levels must be in [2, 5], got {self.levels}")
        if not 0 <= self.min_branch_children <= self.max_branch_children <= 2:
            raise ValueError("branch children per node must lie in [0, 2]")
        if not 1 <= self.min_leaves_per_branch <= self.max_leaves_per_branch <= 10:
            raise ValueError("leaves per branch must lie in [1, 10]")
        if self.horizon < 1 or self.dt <= 0:
            raise ValueError("horizon and dt must be positive")


def _profile(rng, p: GeneratorParams) -> np.ndarray:
    hours = (np.arange(p.horizon) + 0.5) * p.dt % 24.0
    base = rng.uniform(*p.base_load_kw)
    load = base * (0.7 + 0.6 * np.exp(-(((hours - 19.0) / 2.5) ** 2)) + 0.3 * np.exp(-(((hours - 8.0) / 1.5) ** 2)))
    pv_peak = rng.uniform(*p.pv_peak_kw)
    noon = 13.0 + rng.uniform(-0.5, 0.5)
    pv = pv_peak * np.exp(-(((hours - noon) / 2.5) ** 2))
    return load - pv + rng.normal(0.0, p.noise_kw, p.horizon)


def _random_tree(rng, p: GeneratorParams) -> Tree:
    counts = {}
    frontier = [ROOT]
    for depth in range(p.levels - 1):
        last = depth == p.levels - 2
        nxt = []
        for node in frontier:
            nb = 0 if last else int(rng.integers(p.min_branch_children, p.max_branch_children + 1))
            if not last and node is frontier[-1] and not nxt and nb == 0:
                nb = 1  # keep the requested depth reachable
            nl = int(rng.integers(p.min_leaves_per_branch, p.max_leaves_per_branch + 1))
            counts[node] = nb + nl
            for j in range(1, nb + 1):
                nxt.append((1, j) if node == ROOT else node + (j,))
        frontier = nxt
    return Tree.from_children(counts)


def generate(params: GeneratorParams) -> Scenario:
    """Random scenario; a pure function of ``params`` (seed included).

    Every branching node gets a power cap drawn as a fraction of its
    uncontrolled peak, and with some probability a linearised voltage limit.
    Both are relaxed just enough that a reference schedule (each battery
    flattening its own net load) satisfies them, so instances are feasible.
    """
    p = params
    rng = np.random.default_rng(p.seed)
    tree = _random_tree(rng, p)
    leaves = tree.leaf_order
    profiles, prosumers = {}, {}
    for leaf in leaves:
        prof = _profile(rng, p)
        cap = float(rng.uniform(*p.capacity_kwh))
        pmax = float(rng.uniform(*p.power_kw))
        soc0 = float(cap * rng.uniform(*p.soc0_fraction))
        profiles[leaf] = prof
        prosumers[leaf] = Prosumer(leaf, Battery(cap, soc0, pmax, pmax, p.dt), prof, p.price_buy, p.price_sell)

    P = np.array([profiles[k] for k in leaves])
    b = [prosumers[k].battery for k in leaves]
    ref = solve_battery_qp(
        np.ones(len(leaves)), -P, P, 0.0, 0.0,
        [x.p_charge_max for x in b], [x.p_discharge_max for x in b],
        [x.capacity for x in b], [x.soc0 for x in b], p.dt,
    ).x
    net_ref = {k: P[i] + ref[i] for i, k in enumerate(leaves)}

    constraints = []
    for branch in tree.branch_order:
        below = tree.leaf_descendants(branch)
        unc = np.sum([profiles[k] for k in below], axis=0)
        feasible_peak = float(np.max(np.sum([net_ref[k] for k in below], axis=0)))
        peak = float(np.max(unc))
        limit = max(rng.uniform(*p.cap_fraction) * peak, feasible_peak + 0.05 * abs(peak) + 0.1)
        constraints.append(power_constraint(branch, below, np.full(p.horizon, limit)))
        if rng.uniform() < p.voltage_probability:
            grads = {k: float(rng.uniform(*p.grad_p)) for k in below}
            swing = np.sum([grads[k] * net_ref[k] for k in below], axis=0)
            room = 0.9 * min(p.vmax - p.v0, p.v0 - p.vmin)
            worst = float(np.max(np.abs(swing)))
            if worst > room:
                grads = {k: g * room / worst for k, g in grads.items()}
            model = SensitivityModel(p.v0, p.vmax, grads, p.vmin)
            constraints.append(voltage_constraint(branch, below, model, p.horizon))

    objective = RootObjective(-P.sum(axis=0), p.objective_weight, "peak_shaving")
    meta = {"seed": p.seed, "generator": asdict(p)}
    return Scenario(tree, p.horizon, p.dt, prosumers, constraints, objective, meta)


def example_case(seed: int = 0, **overrides) -> Scenario:
    """Four levels with a single aggregator in each of the first three."""
    kw = dict(levels=4, seed=seed, min_branch_children=1, max_branch_children=1)
    kw.update(overrides)
    return generate(GeneratorParams(**kw))
