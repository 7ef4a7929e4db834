"""Hierarchical sharing ADMM over an aggregation tree.

Every coupling constraint ``lower <= S_B x <= upper`` owns an averaged
auxiliary variable ``y_bar`` and a scaled dual ``lambda_bar``. One iteration:

1. forward pass: each branch sends its reference ``(S_B x - y_bar)/N_B +
   lambda_bar`` down, together with the references received from above;
2. agents solve their local problems (all at once in parallel mode);
3. backward pass: partial aggregates travel up, summed at every node;
4. branch updates: ``y_bar = proj(S_B x + N_B * lambda_bar)`` (the root
   applies the proximal step of its objective first), then the dual step
   ``lambda_bar += rho / N_B * (S_B x - y_bar)``.

The run stops once ``max_B ||S_B x - y_bar||_inf <= tol``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .agent import ReferenceBundle, local_update, local_update_batch
from .grid import CouplingConstraint
from .prox import RootObjective, project_branch, prox_tracking
from .tree import ROOT, NodeId, Tree, node_label

logger = logging.getLogger(__name__)

MODES = ("parallel", "sequential")
BACKENDS = ("batched", "dense")


@dataclass(eq=False)
class BranchState:
    """ADMM state of one coupling constraint.

    ``objective`` is set only on the root block that carries the system
    objective; ``label`` names the block in traces and messages.
    """

    constraint: CouplingConstraint
    y_bar: np.ndarray
    lambda_bar: np.ndarray
    n_leaves: int
    label: str = ""
    objective: RootObjective | None = None

    def __post_init__(self):
        if self.n_leaves <= 0:
            raise ValueError("a branch constraint needs at least one leaf below it")
        self.y_bar = np.asarray(self.y_bar, dtype=float)
        self.lambda_bar = np.asarray(self.lambda_bar, dtype=float)
        if not self.label:
            self.label = self.constraint.label

    @property
    def branch(self) -> NodeId:
        return self.constraint.branch

    @classmethod
    def initial(cls, constraint, n_leaves, label="", objective=None) -> "BranchState":
        T = constraint.horizon
        return cls(constraint, np.zeros(T), np.zeros(T), n_leaves, label, objective)


@dataclass
class SolverConfig:
    rho: float = 1.0
    tol: float = 1e-2
    max_iter: int = 5000
    mode: str = "parallel"
    backend: str = "batched"
    agent_tol: float = 1e-6

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        self.max_iter = int(self.max_iter)


@dataclass
class Message:
    sender: NodeId
    receiver: NodeId
    kind: str  # "reference" (downward) or "aggregate" (upward)
    payload: dict


@dataclass
class SolveReport:
    x_star: dict
    iterations: int
    converged: bool
    status: str
    labels: list
    branches: list
    primal_history: np.ndarray
    dual_history: np.ndarray
    timings: dict
    states: list
    messages: list = field(default_factory=list, repr=False)

    @property
    def final_primal(self) -> float:
        return float(self.primal_history[-1].max()) if len(self.primal_history) else np.inf

    def branch_history(self, which: str = "primal") -> dict:
        """Per-branch maximum over that branch's constraints, per iteration."""
        hist = self.primal_history if which == "primal" else self.dual_history
        out = {}
        for b in dict.fromkeys(self.branches):
            cols = [j for j, bb in enumerate(self.branches) if bb == b]
            out[b] = hist[:, cols].max(axis=1)
        return out


def reference_signal(state: BranchState, Sx) -> np.ndarray:
    return (np.asarray(Sx, dtype=float) - state.y_bar) / state.n_leaves + state.lambda_bar


def primal_residual(state: BranchState, Sx) -> float:
    return float(np.max(np.abs(np.asarray(Sx, dtype=float) - state.y_bar), initial=0.0))


def dual_update(state: BranchState, Sx_new, rho: float) -> np.ndarray:
    state.lambda_bar = state.lambda_bar + (rho / state.n_leaves) * (np.asarray(Sx_new, dtype=float) - state.y_bar)
    return state.lambda_bar


def branch_update(state: BranchState, Sx_new, rho: float) -> np.ndarray:
    """New ``y_bar``: projection, preceded by the objective's prox at the root."""
    z = np.asarray(Sx_new, dtype=float) + state.n_leaves * state.lambda_bar
    if state.objective is not None:
        z = prox_tracking(z, rho * state.n_leaves, state.objective)
    state.y_bar = project_branch(state.constraint, z)
    return state.y_bar


def _blocks_by_branch(states):
    out = {}
    for s in states:
        out.setdefault(s.branch, []).append(s)
    return out


def forward_pass(tree: Tree, states, x_current=None, aggregates=None, log=None) -> dict:
    """Send reference signals from the root to every leaf.

    ``aggregates`` maps block labels to ``S_B x``; when omitted it is computed
    from ``x_current`` with :func:`backward_pass`. Each message carries only
    reference vectors. Leaves attach their own weights to build a bundle.
    """
    if aggregates is None:
        if x_current is None:
            raise ValueError("need x_current or aggregates")
        aggregates = backward_pass(tree, states, x_current)
    by_branch = _blocks_by_branch(states)
    by_label = {s.label: s for s in states}
    bundles = {}
    stack = [(ROOT, {})]
    while stack:
        node, received = stack.pop()
        if tree.is_leaf(node):
            b = ReferenceBundle()
            for label, r in received.items():
                b.add(label, r, by_label[label].constraint.weights[node])
            bundles[node] = b
            continue
        outgoing = dict(received)
        for s in by_branch.get(node, []):
            outgoing[s.label] = reference_signal(s, aggregates[s.label])
        for child in reversed(tree.children(node)):
            if log is not None:
                log.append(Message(node, child, "reference", dict(outgoing)))
            stack.append((child, outgoing))
    return bundles


def backward_pass(tree: Tree, states, x_new, log=None) -> dict:
    """Aggregate leaf actions bottom-up; returns ``{label: S_B x}``.

    A leaf sends its weighted contribution to every constraint above it; a
    branch sums what its children send, keeps the totals of its own
    constraints and forwards one partial sum per remaining constraint.
    """
    by_branch = _blocks_by_branch(states)
    above = {}
    for s in states:
        for leaf in s.constraint.weights:
            above.setdefault(leaf, []).append(s)
    result = {}

    def visit(node):
        if tree.is_leaf(node):
            if node not in x_new:
                raise KeyError(f"missing profile for leaf {node_label(node)}")
            xi = np.asarray(x_new[node], dtype=float)
            return {s.label: s.constraint.weights[node] * xi for s in above.get(node, [])}
        acc = {}
        for child in tree.children(node):
            msg = visit(child)
            if log is not None:
                log.append(Message(child, node, "aggregate", msg))
            for k, v in msg.items():
                acc[k] = acc[k] + v if k in acc else v.copy()
        for s in by_branch.get(node, []):
            result[s.label] = acc.pop(s.label, np.zeros(s.constraint.horizon))
        return acc

    visit(ROOT)
    return result


def build_states(scenario) -> list:
    """One state per coupling constraint, bounds shifted to battery units.

    The root objective is attached to the first unit-weight root constraint
    covering every leaf; without one it gets its own unconstrained block.
    """
    tree = scenario.tree
    states = []
    for c in scenario.solver_constraints():
        states.append(BranchState.initial(c, len(tree.leaf_descendants(c.branch))))
    seen = {}
    for s in states:
        n = seen.get(s.label, 0)
        seen[s.label] = n + 1
        if n:
            s.label = f"{s.label}#{n}"
    obj = scenario.root_objective
    if obj.weight > 0:
        host = next(
            (s for s in states if s.branch == ROOT and s.constraint.kind == "power"
             and all(v == 1.0 for v in s.constraint.weights.values())),
            None,
        )
        if host is not None:
            host.objective = obj
        else:
            leaves = tree.leaf_order
            T = scenario.horizon
            c = CouplingConstraint(ROOT, {k: 1.0 for k in leaves}, np.full(T, np.inf), np.full(T, -np.inf), "objective")
            states.insert(0, BranchState.initial(c, len(leaves), objective=obj))
    return states


def _solve_agents(prosumers, x_prev, bundles, rho, cfg):
    """Returns the new actions and the critical-path time of the phase."""
    if cfg.backend == "batched":
        t0 = time.perf_counter()
        X = local_update_batch(prosumers, x_prev, bundles, rho, cfg.agent_tol)
        dt = time.perf_counter() - t0
        # One vectorized call; per-agent share is the best available estimate.
        return X, dt / len(prosumers), dt
    X = np.empty_like(x_prev)
    worst = total = 0.0
    for i, p in enumerate(prosumers):
        t0 = time.perf_counter()
        X[i] = local_update(p, x_prev[i], bundles[i], rho, tol=cfg.agent_tol)
        d = time.perf_counter() - t0
        worst, total = max(worst, d), total + d
    return X, worst, total


def run(scenario, config: SolverConfig | None = None, record_messages: bool = False,
        callback=None) -> SolveReport:
    """Solve ``scenario`` with hierarchical ADMM.

    ``callback(k, states, x)`` is called after every iteration if given.
    Agent infeasibility propagates as :class:`~hieradmm.agent.InfeasibleError`.
    """
    cfg = config or SolverConfig()
    if cfg.mode == "sequential":
        return _run_sequential(scenario, cfg, record_messages, callback)
    tree = scenario.tree
    leaves = list(scenario.leaf_order)
    prosumers = [scenario.prosumers[k] for k in leaves]
    states = build_states(scenario)
    N, T = len(leaves), scenario.horizon
    X = np.zeros((N, T))
    log = [] if record_messages else None
    timings = dict.fromkeys(("forward", "agents", "agents_critical_path", "backward", "update"), 0.0)
    primal, dual = [], []
    aggregates = backward_pass(tree, states, dict(zip(leaves, X)))
    converged = False
    k = 0
    t_start = time.perf_counter()
    for k in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        bundles = forward_pass(tree, states, aggregates=aggregates, log=log)
        t1 = time.perf_counter()
        X, crit, _ = _solve_agents(prosumers, X, [bundles[l] for l in leaves], cfg.rho, cfg)
        t2 = time.perf_counter()
        aggregates = backward_pass(tree, states, dict(zip(leaves, X)), log=log)
        t3 = time.perf_counter()
        p_row, d_row = [], []
        for s in states:
            y_old = s.y_bar
            Sx = aggregates[s.label]
            branch_update(s, Sx, cfg.rho)
            dual_update(s, Sx, cfg.rho)
            p_row.append(primal_residual(s, Sx))
            d_row.append(cfg.rho * float(np.max(np.abs(s.y_bar - y_old), initial=0.0)))
        t4 = time.perf_counter()
        timings["forward"] += t1 - t0
        timings["agents"] += t2 - t1
        timings["agents_critical_path"] += crit
        timings["backward"] += t3 - t2
        timings["update"] += t4 - t3
        primal.append(p_row)
        dual.append(d_row)
        if log is not None:
            log.append(None)  # iteration boundary
        if callback is not None:
            callback(k, states, X)
        if max(p_row, default=0.0) <= cfg.tol:
            converged = True
            break
    timings["total"] = time.perf_counter() - t_start
    return _report(scenario, states, leaves, X, k, converged, primal, dual, timings, log or [], cfg)


def _run_sequential(scenario, cfg: SolverConfig, record_messages, callback) -> SolveReport:
    """Per-copy updates: every (constraint, leaf) pair keeps its own y and lambda.

    Agents solve one after another. A per-copy agent problem depends only on
    its own copies, so the sweep order does not change the iterates; the
    fixed point and the trajectory coincide with the averaged parallel form.
    """
    leaves = list(scenario.leaf_order)
    idx = {k: i for i, k in enumerate(leaves)}
    prosumers = [scenario.prosumers[k] for k in leaves]
    states = build_states(scenario)
    N, T = len(leaves), scenario.horizon
    members = [np.array([idx[l] for l in s.constraint.leaves]) for s in states]
    weights = [np.array([s.constraint.weights[l] for l in s.constraint.leaves]) for s in states]
    Y = [np.zeros((len(m), T)) for m in members]
    L = [np.zeros((len(m), T)) for m in members]
    X = np.zeros((N, T))
    timings = dict.fromkeys(("forward", "agents", "agents_critical_path", "backward", "update"), 0.0)
    primal, dual = [], []
    converged = False
    k = 0
    t_start = time.perf_counter()
    for k in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        bundles = [ReferenceBundle() for _ in leaves]
        for s, m, a, y, lam in zip(states, members, weights, Y, L):
            r = a[:, None] * X[m] - y + lam
            for j, i in enumerate(m):
                bundles[i].add(s.label, r[j], a[j])
        t1 = time.perf_counter()
        X_new = np.empty_like(X)
        for i, p in enumerate(prosumers):
            if cfg.backend == "dense":
                X_new[i] = local_update(p, X[i], bundles[i], cfg.rho, tol=cfg.agent_tol)
            else:
                X_new[i] = local_update_batch([p], X[i:i + 1], [bundles[i]], cfg.rho, cfg.agent_tol)[0]
        X = X_new
        t2 = time.perf_counter()
        p_row, d_row = [], []
        for s, m, a, y, lam in zip(states, members, weights, Y, L):
            ax = a[:, None] * X[m]
            v = ax + lam
            Sx = ax.sum(axis=0)
            z = v.sum(axis=0)
            if s.objective is not None:
                z = prox_tracking(z, cfg.rho * s.n_leaves, s.objective)
            y_sum = project_branch(s.constraint, z)
            y[:] = v + (y_sum - v.sum(axis=0)) / s.n_leaves
            lam += cfg.rho * (ax - y)
            y_old = s.y_bar
            s.y_bar = y.sum(axis=0)
            s.lambda_bar = lam.mean(axis=0)
            p_row.append(primal_residual(s, Sx))
            d_row.append(cfg.rho * float(np.max(np.abs(s.y_bar - y_old), initial=0.0)))
        t3 = time.perf_counter()
        timings["forward"] += t1 - t0
        timings["agents"] += t2 - t1
        timings["agents_critical_path"] += t2 - t1
        timings["update"] += t3 - t2
        primal.append(p_row)
        dual.append(d_row)
        if callback is not None:
            callback(k, states, X)
        if max(p_row, default=0.0) <= cfg.tol:
            converged = True
            break
    timings["total"] = time.perf_counter() - t_start
    return _report(scenario, states, leaves, X, k, converged, primal, dual, timings, [], cfg)


def _report(scenario, states, leaves, X, k, converged, primal, dual, timings, log, cfg) -> SolveReport:
    primal = np.array(primal, dtype=float).reshape(len(primal), len(states))
    dual = np.array(dual, dtype=float).reshape(len(dual), len(states))
    status = "converged" if converged else _diagnose(primal, dual, cfg)
    if not converged:
        logger.info("stopped after %d iterations without convergence (%s)", k, status)
    return SolveReport(
        x_star={l: X[i].copy() for i, l in enumerate(leaves)},
        iterations=k,
        converged=converged,
        status=status,
        labels=[s.label for s in states],
        branches=[s.branch for s in states],
        primal_history=primal,
        dual_history=dual,
        timings=timings,
        states=states,
        messages=log,
    )


def _diagnose(primal, dual, cfg) -> str:
    """Tell a stalled infeasible problem apart from slow convergence.

    With an empty coupling set the primal residual settles at the distance
    between the sets while the dual residual vanishes.
    """
    n = len(primal)
    if n < 50:
        return "max_iter"
    tail = primal[-max(10, n // 5):].max(axis=1)
    settled = tail.min() > cfg.tol and (tail.max() - tail.min()) <= 1e-3 * tail.max()
    if settled and dual[-1].max() <= 1e-3 * cfg.tol:
        return "infeasible"
    return "max_iter"


class HierarchicalADMM(BaseEstimator):
    """Estimator wrapper: ``HierarchicalADMM(rho=1.0).fit(scenario)``.

    After fitting, ``x_`` maps leaves to schedules, ``report_`` holds the full
    :class:`SolveReport` and ``objective_`` the system objective.
    """

    def __init__(self, rho=1.0, tol=1e-2, max_iter=5000, mode="parallel", backend="batched", agent_tol=1e-6):
        self.rho = rho
        self.tol = tol
        self.max_iter = max_iter
        self.mode = mode
        self.backend = backend
        self.agent_tol = agent_tol

    def fit(self, scenario, y=None):
        cfg = SolverConfig(self.rho, self.tol, self.max_iter, self.mode, self.backend, self.agent_tol)
        self.report_ = run(scenario, cfg)
        self.x_ = self.report_.x_star
        self.n_iter_ = self.report_.iterations
        self.converged_ = self.report_.converged
        self.objective_ = scenario.objective(self.x_)
        return self
