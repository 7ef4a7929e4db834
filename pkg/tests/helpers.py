import itertools

import numpy as np

from hieradmm.agent import Battery, Prosumer
from hieradmm.grid import power_constraint
from hieradmm.qp import QuadraticProgram
from hieradmm.prox import RootObjective
from hieradmm.scenario import Scenario
from hieradmm.tree import ROOT, Tree


def grid_search(f, feasible, lo, hi, points=15, rounds=12):
    """Coarse-to-fine grid search of a convex function over a box.

    ``f`` and ``feasible`` take a ``(k, n)`` array of candidates.
    """
    lo, hi = np.array(lo, dtype=float), np.array(hi, dtype=float)
    best = None
    for _ in range(rounds):
        axes = [np.linspace(lo[t], hi[t], points) for t in range(len(lo))]
        X = np.array(list(itertools.product(*axes)))
        vals = np.where(feasible(X), f(X), np.inf)
        best = X[np.argmin(vals)]
        width = (hi - lo) / (points - 1) * 2
        lo, hi = np.maximum(best - width, lo), np.minimum(best + width, hi)
    return best


def flat_scenario(P, *, pb=0.25, ps=0.10, capacity=4.0, soc0=2.0, pmax=2.0, dt=1.0, weight=1.0,
                  root_cap=None, root_lower=None):
    """Two-level scenario: one aggregator above ``len(P)`` prosumers."""
    P = [np.asarray(p, dtype=float) for p in P]
    T = len(P[0])
    tree = Tree.from_children({ROOT: len(P)})
    leaves = tree.leaf_order
    prosumers = {
        k: Prosumer(k, Battery(capacity, soc0, pmax, pmax, dt), P[i], pb, ps) for i, k in enumerate(leaves)
    }
    constraints = []
    if root_cap is not None:
        lower = None if root_lower is None else np.broadcast_to(root_lower, (T,))
        constraints.append(power_constraint(ROOT, leaves, np.broadcast_to(root_cap, (T,)), lower))
    obj = RootObjective(-np.sum(P, axis=0), weight, "peak_shaving")
    return Scenario(tree, T, dt, prosumers, constraints, obj)


def random_qp(rng, strict=True):
    """Feasible random QP with a finite box around a known point."""
    n = int(rng.integers(1, 21))
    m = int(rng.integers(0, 21))
    M = rng.normal(size=(n, n))
    H = M.T @ M + (0.1 * np.eye(n) if strict else 0.0)
    if not strict:
        H[:, 0] = H[0, :] = 0.0  # PSD with a flat direction
    g = 3 * rng.normal(size=n)
    z0 = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    az = A @ z0
    lb, ub = az - rng.uniform(0, 2, m), az + rng.uniform(0, 2, m)
    lb[rng.random(m) < 0.3] = -np.inf
    ub[rng.random(m) < 0.3] = np.inf
    A = np.vstack([A, np.eye(n)])
    lb = np.concatenate([lb, z0 - 5])
    ub = np.concatenate([ub, z0 + 5])
    return QuadraticProgram(H, g, A, lb, ub)


def dual_projected_gradient(P, iters=100000, gtol=1e-9):
    """Accelerated projected gradient on the dual of a strictly convex QP.

    Upper and lower rows get separate non-negative multipliers, so the dual is
    smooth. Stops once the gradient mapping is below ``gtol``. Returns the
    dual value, a lower bound on the optimum.
    """
    Hinv = np.linalg.inv(P.H)
    up, lo = np.isfinite(P.ub), np.isfinite(P.lb)
    B = np.vstack([P.A[up], -P.A[lo]])
    c = np.concatenate([P.ub[up], -P.lb[lo]])
    L = np.linalg.eigvalsh(B @ Hinv @ B.T).max() if len(c) else 1.0

    def grad_val(mu):
        z = -Hinv @ (P.g + B.T @ mu)
        return B @ z - c, P.objective(z) + mu @ (B @ z - c)

    mu = v = np.zeros(len(c))
    t = 1.0
    for _ in range(iters):
        gv, _ = grad_val(v)
        mu_new = np.maximum(v + gv / L, 0.0)
        if L * np.abs(mu_new - v).max(initial=0.0) <= gtol:
            return grad_val(mu_new)[1]
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        v = mu_new + (t - 1) / t_new * (mu_new - mu)
        if (mu_new - mu) @ (v - mu_new) > 0:  # gradient restart
            v, t_new = mu_new, 1.0
        mu, t = mu_new, t_new
    return grad_val(mu)[1]


def privacy_scenario():
    tree = Tree.from_children({ROOT: 4, (1, 1): 3, (1, 2): 2})
    rng = np.random.default_rng(8)
    T = 6
    prosumers = {
        k: Prosumer(k, Battery(8.0, 4.0, 2.0, 2.0, 1.0), rng.normal(1.0, 1.0, T), 0.25, 0.10)
        for k in tree.leaf_order
    }
    constraints = [power_constraint(ROOT, tree.leaf_order, np.full(T, 6.0))]
    for b in [(1, 1), (1, 2)]:
        below = tree.leaf_descendants(b)
        constraints.append(power_constraint(b, below, np.full(T, 2.5)))
    obj = RootObjective(-np.sum([p.p_uncontrolled for p in prosumers.values()], axis=0), 1.0, "peak_shaving")
    return Scenario(tree, T, 1.0, prosumers, constraints, obj)


class TrailRecorder:
    """Run callback that keeps every iterate in ``trail``."""

    def __init__(self):
        self.trail = []

    def __call__(self, k, states, X):
        self.trail.append(X.copy())


def message_privacy_audit(scn, report, trail):
    """Check the captured messages of a run.

    Returns the number of payload-vs-profile comparisons made and a list of
    violations: malformed payloads, or any branch or reference message that
    equals an individual leaf profile (plain or weighted).
    """
    tree = scn.tree
    labels = {st.label: st for st in report.states}
    leaves = list(scn.leaf_order)
    T = scn.horizon
    iterations, current = [], []
    for m in report.messages:
        if m is None:
            iterations.append(current)
            current = []
        else:
            current.append(m)
    violations = []
    if len(iterations) != len(trail):
        violations.append("iteration boundaries do not match the iterates")
    checked = 0
    for k, msgs in enumerate(iterations):
        # Forward messages use the previous iterate, backward ones the new one.
        profiles = [trail[k]] + ([trail[k - 1]] if k else [])
        for m in msgs:
            if m.kind == "reference" and tree.parent(m.receiver) != m.sender:
                violations.append(f"reference skips a level: {m.sender} -> {m.receiver}")
            for lab, vec in m.payload.items():
                if np.shape(vec) != (T,):
                    violations.append(f"payload {lab} from {m.sender} is not one length-T vector")
                if m.kind == "aggregate":
                    if tree.parent(m.sender) != m.receiver:
                        violations.append(f"aggregate skips a level: {m.sender} -> {m.receiver}")
                    if labels[lab].branch not in tree.ancestors(m.sender):
                        violations.append(f"aggregate {lab} sent by {m.sender} is not for an ancestor")
                    if tree.is_leaf(m.sender):
                        continue  # a leaf shares its own profile with its parent only
                for X in profiles:
                    for i, leaf in enumerate(leaves):
                        a = labels[lab].constraint.weights.get(leaf, 1.0)
                        for cand in (X[i], a * X[i]):
                            if np.abs(cand).max() > 1e-6:
                                checked += 1
                                if np.allclose(vec, cand, atol=1e-9):
                                    violations.append(f"{m.kind} {m.sender}->{m.receiver} carries profile of {leaf}")
    return checked, violations
