"""Command-line interface: ``hieradmm generate | run | batch | verify``.

Exit codes: 0 success, 1 verification thresholds not met, 2 usage or input
error, 3 no convergence within the iteration cap, 4 infeasible problem.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import oracle
from .agent import InfeasibleError, SolverError, soc_trajectory
from .coordinator import SolverConfig, run
from .grid import aggregate
from .scenario import GeneratorParams, ScenarioError, example_case, generate, load
from .tree import node_label

logger = logging.getLogger("hieradmm")

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
OUT_ENV = "HIERADMM_OUT"
FLOAT_FMT = "{:.10g}"


@dataclass
class RunRecord:
    scenario: str
    seed: int | None
    levels: int
    agents: int
    branching_nodes: int
    iterations: int
    converged: bool
    status: str
    objective: float
    no_action_objective: float
    max_violation: float
    root_sq_norm: float  # ||S_root (x + P_u)||^2 at the returned schedule
    root_sq_norm_uncontrolled: float  # same with the batteries idle
    wall_time: float
    timings: dict

    @property
    def time_per_agent(self) -> float:
        return self.wall_time / self.agents


def _fmt(v) -> str:
    return FLOAT_FMT.format(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _out_dir(arg) -> Path:
    out = Path(arg or os.environ.get(OUT_ENV) or "results")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> SolverConfig:
    return SolverConfig(rho=args.rho, tol=args.tol, max_iter=args.max_iter, mode=args.mode, backend=args.backend)


def solve_record(scn, cfg: SolverConfig, name: str = ""):
    """Run the hierarchical solver and summarize it as a :class:`RunRecord`."""
    t0 = time.perf_counter()
    report = run(scn, cfg)
    wall = time.perf_counter() - t0
    summ = scn.summary()
    unc = scn.root_aggregate_uncontrolled()
    net = unc + np.sum(list(report.x_star.values()), axis=0)
    rec = RunRecord(
        scenario=name,
        seed=scn.metadata.get("seed"),
        levels=summ["levels"],
        agents=summ["leaves"],
        branching_nodes=summ["branching_nodes"],
        iterations=report.iterations,
        converged=report.converged,
        status=report.status,
        objective=scn.objective(report.x_star),
        no_action_objective=scn.no_action_objective(),
        max_violation=scn.constraint_violation(report.x_star),
        root_sq_norm=float(net @ net),
        root_sq_norm_uncontrolled=float(unc @ unc),
        wall_time=wall,
        timings=report.timings,
    )
    return rec, report


# -- generate --------------------------------------------------------------


def cmd_generate(args) -> int:
    overrides = {}
    for name in ("horizon", "dt", "max_leaves_per_branch", "max_branch_children", "voltage_probability"):
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    if args.cap_fraction is not None:
        overrides["cap_fraction"] = tuple(args.cap_fraction)
    try:
        if args.example_case:
            scn = example_case(args.seed, **overrides)
        else:
            scn = generate(GeneratorParams(levels=args.levels, seed=args.seed, **overrides))
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(scn.dumps())
    s = scn.summary()
    print(f"wrote {out}: {s['levels']} levels, {s['branching_nodes']} branching nodes, "
          f"{s['leaves']} leaves, {s['constraints']} constraints, T={s['horizon']}")
    return EXIT_OK


# -- run -------------------------------------------------------------------


def write_run_outputs(scn, report, out: Path, svg: bool = False) -> None:
    """Residual trace, solution and per-constraint aggregate CSVs."""
    hist_p = report.branch_history("primal")
    hist_d = report.branch_history("dual")
    rows = []
    for k in range(report.iterations):
        for b in hist_p:
            rows.append([k + 1, node_label(b), _fmt(hist_p[b][k]), _fmt(hist_d[b][k])])
    _write_csv(out / "residuals.csv", ["iter", "branch_id", "primal_inf", "dual_inf"], rows)

    rows = []
    for leaf in scn.leaf_order:
        x = report.x_star[leaf]
        soc = soc_trajectory(scn.prosumers[leaf].battery, x)
        for t in range(scn.horizon):
            rows.append([node_label(leaf), t, _fmt(x[t]), _fmt(soc[t])])
    _write_csv(out / "solution.csv", ["leaf_id", "t", "x", "soc"], rows)

    unc = scn.uncontrolled()
    after = {k: unc[k] + report.x_star[k] for k in unc}
    names = {}
    for c in scn.constraints:
        base = f"aggregate_{node_label(c.branch)}_{c.kind}"
        names[base] = names.get(base, 0) + 1
        fname = base + (f"_{names[base]}" if names[base] > 1 else "") + ".csv"
        before_v, after_v = aggregate(c, unc), aggregate(c, after)
        two_sided = np.isfinite(c.lower).any()
        header = ["t", "Sx_before", "Sx_after", "bound"] + (["lower_bound"] if two_sided else [])
        rows = []
        for t in range(scn.horizon):
            row = [t, _fmt(before_v[t]), _fmt(after_v[t]), _fmt(c.upper[t])]
            if two_sided:
                row.append(_fmt(c.lower[t]))
            rows.append(row)
        _write_csv(out / fname, header, rows)
    if svg:
        _plots(scn, report, out, hist_p)


def _plots(scn, report, out: Path, hist_p) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hieradmm"
    meta = {"Date": None}
    fig, ax = plt.subplots(figsize=(6, 4))
    for b, h in hist_p.items():
        ax.semilogy(np.arange(1, len(h) + 1), np.maximum(h, 1e-16), label=node_label(b))
    ax.set_xlabel("iteration")
    ax.set_ylabel("primal residual (inf-norm)")
    ax.legend(fontsize="small")
    fig.savefig(out / "residuals.svg", metadata=meta)
    plt.close(fig)

    unc = scn.uncontrolled()
    after = {k: unc[k] + report.x_star[k] for k in unc}
    fig, axes = plt.subplots(len(scn.constraints), 1, figsize=(6, 2.2 * len(scn.constraints)), squeeze=False)
    t = np.arange(scn.horizon) * scn.dt
    for ax, c in zip(axes[:, 0], scn.constraints):
        ax.plot(t, aggregate(c, unc), label="no action")
        ax.plot(t, aggregate(c, after), label="optimized")
        ax.plot(t, c.upper, "k--", lw=0.8)
        if np.isfinite(c.lower).any():
            ax.plot(t, c.lower, "k--", lw=0.8)
        ax.set_title(c.label, fontsize="small")
    axes[0, 0].legend(fontsize="small")
    axes[-1, 0].set_xlabel("hours")
    fig.tight_layout()
    fig.savefig(out / "aggregates.svg", metadata=meta)
    plt.close(fig)


def cmd_run(args) -> int:
    try:
        scn = load(args.scenario)
    except (OSError, ScenarioError) as exc:
        print(f"error: cannot load scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(args.out)
    try:
        rec, report = solve_record(scn, _config(args), Path(args.scenario).name)
    except InfeasibleError as exc:
        leaf = node_label(exc.leaf) if exc.leaf is not None else "?"
        print(f"error: agent {leaf} infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    write_run_outputs(scn, report, out, svg=args.svg)
    doc = asdict(rec)
    (out / "run.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(json.dumps(doc))
    return EXIT_OK if rec.converged else EXIT_NOT_CONVERGED


# -- batch -----------------------------------------------------------------


def run_seed(seed: int, i: int) -> int:
    """Scenario seed of run ``i``; independent of the batch size."""
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def _batch_job(job):
    i, scn_seed, levels, horizon, dt, cfg = job
    try:
        scn = generate(GeneratorParams(levels=levels, seed=scn_seed, horizon=horizon, dt=dt))
        rec, report = solve_record(scn, cfg, f"run{i:04d}")
        curve = report.primal_history.max(axis=1)
        return i, asdict(rec), curve, None
    except Exception as exc:  # recorded, a single failure must not stop the batch
        return i, None, None, f"{type(exc).__name__}: {exc}"


def mean_residual_curve(curves) -> np.ndarray:
    """Mean over runs of the per-iteration max primal residual.

    Runs that stopped earlier are held at their final value, so every point
    averages over all runs.
    """
    curves = [np.asarray(c) for c in curves if c is not None and len(c)]
    if not curves:
        return np.zeros(0)
    n = max(len(c) for c in curves)
    padded = np.array([np.concatenate([c, np.full(n - len(c), c[-1])]) for c in curves])
    return padded.mean(axis=0)


def trailing_decrease_fraction(curve, window: int = 10) -> float:
    """Share of iterations ``k >= window`` with ``curve[k] < curve[k - window]``."""
    curve = np.asarray(curve)
    if len(curve) <= window:
        return 1.0
    return float(np.mean(curve[window:] < curve[:-window]))


def naive_nesting_factor(levels: int, iters_single: float, branches: float) -> float:
    """Cost of nesting single-level sharing solvers, relative to one level.

    ``N_i^L * N_b^((L + L^2)/2)`` with ``L = levels - 1`` aggregator levels,
    divided by the same expression at ``L = 1``.
    """
    L = levels - 1
    return float(iters_single ** (L - 1) * branches ** ((L + L * L) / 2 - 1))


def summarize(records, curves, cfg_tol: float):
    """Deterministic summary plus timing statistics (kept apart)."""
    ok = [r for r in records if r is not None]
    by_level = {}
    for r, c in zip(records, curves):
        if r is not None:
            by_level.setdefault(r["levels"], []).append((r, c))
    summary = {"runs": len(records), "succeeded": len(ok), "converged": sum(r["converged"] for r in ok),
               "tol": cfg_tol, "levels": {}}
    timing = {"levels": {}}
    for lv in sorted(by_level):
        group = by_level[lv]
        its = np.array([r["iterations"] for r, _ in group])
        tpa = np.array([r["wall_time"] / r["agents"] for r, _ in group])
        curve = mean_residual_curve([c for _, c in group])
        summary["levels"][str(lv)] = {
            "runs": len(group),
            "converged": int(sum(r["converged"] for r, _ in group)),
            "agents_mean": float(np.mean([r["agents"] for r, _ in group])),
            "iterations_median": float(np.median(its)),
            "mean_primal_residual": [float(FLOAT_FMT.format(v)) for v in curve],
        }
        q1, med, q3 = np.percentile(tpa, [25, 50, 75])
        timing["levels"][str(lv)] = {"time_per_agent_median": med, "time_per_agent_iqr": [q1, q3]}
    curve_all = mean_residual_curve(curves)
    summary["mean_primal_residual"] = [float(FLOAT_FMT.format(v)) for v in curve_all]
    summary["trailing_decrease_fraction"] = trailing_decrease_fraction(curve_all)
    if ok:
        agents = np.array([r["agents"] for r in ok])
        its = np.array([r["iterations"] for r in ok])
        order = np.argsort(agents, kind="stable")
        summary["iterations_median_by_agent_tercile"] = [
            float(np.median(its[part])) if len(part) else None for part in np.array_split(order, 3)
        ]
    levels = sorted(timing["levels"], key=int)
    if levels:
        lo_lv, hi_lv = levels[0], levels[-1]
        timing["ratio_highest_to_lowest"] = (
            timing["levels"][hi_lv]["time_per_agent_median"] / timing["levels"][lo_lv]["time_per_agent_median"]
        )
        base = summary["levels"][lo_lv]
        n_i = base["iterations_median"]
        # Growth of time per agent if single-level solvers were nested, with
        # the generator's cap of two branches per level.
        timing["naive_nesting_prediction"] = {
            lv: naive_nesting_factor(int(lv), n_i, 2.0) / naive_nesting_factor(int(lo_lv), n_i, 2.0)
            for lv in levels
        }
    return summary, timing


def batch(count, levels_min, levels_max, seed, cfg, horizon=96, dt=None, jobs=1):
    """Run ``count`` generated scenarios; returns records, curves and errors."""
    dt = 24.0 / horizon if dt is None else dt
    span = levels_max - levels_min + 1
    work = [(i, run_seed(seed, i), levels_min + i % span, horizon, dt, cfg) for i in range(count)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_batch_job, work))
    else:
        results = [_batch_job(w) for w in work]
    results.sort(key=lambda r: r[0])
    return [r[1] for r in results], [r[2] for r in results], {r[0]: r[3] for r in results if r[3]}


def cmd_batch(args) -> int:
    if not 2 <= args.levels_min <= args.levels_max <= 5:
        print("error: need 2 <= --levels-min <= --levels-max <= 5", file=sys.stderr)
        return EXIT_USAGE
    if args.count < 1:
        print("error: --count must be positive", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(args.out)
    cfg = _config(args)
    records, curves, errors = batch(args.count, args.levels_min, args.levels_max, args.seed, cfg,
                                    args.horizon, args.dt, args.jobs)
    cols = ["run", "seed", "levels", "agents", "branching_nodes", "iterations", "converged", "status",
            "objective", "no_action_objective", "max_violation", "root_sq_norm", "root_sq_norm_uncontrolled"]
    rows = []
    for i, r in enumerate(records):
        if r is None:
            rows.append([i, run_seed(args.seed, i)] + [""] * 5 + ["error"] + [""] * 5)
            continue
        rows.append([i, r["seed"], r["levels"], r["agents"], r["branching_nodes"], r["iterations"],
                     int(r["converged"]), r["status"], _fmt(r["objective"]), _fmt(r["no_action_objective"]),
                     _fmt(r["max_violation"]), _fmt(r["root_sq_norm"]), _fmt(r["root_sq_norm_uncontrolled"])])
    _write_csv(out / "runs.csv", cols, rows)
    summary, timing = summarize(records, curves, cfg.tol)
    summary["errors"] = {str(k): v for k, v in errors.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    (out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    with open(out / "records.jsonl", "w") as fh:
        for r in records:
            if r is not None:
                fh.write(json.dumps(r) + "\n")
    print(f"{summary['succeeded']}/{summary['runs']} runs succeeded, {summary['converged']} converged")
    for lv, g in summary["levels"].items():
        t = timing["levels"][lv]
        print(f"levels={lv}: runs={g['runs']} median iterations={g['iterations_median']:.0f} "
              f"median time/agent={t['time_per_agent_median'] * 1e3:.1f} ms")
    if errors:
        for i, e in sorted(errors.items()):
            print(f"run {i} failed: {e}", file=sys.stderr)
    return EXIT_OK if summary["succeeded"] else EXIT_NOT_CONVERGED


# -- verify ----------------------------------------------------------------


def cmd_verify(args) -> int:
    try:
        scn = load(args.scenario)
    except (OSError, ScenarioError) as exc:
        print(f"error: cannot load scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cfg = _config(args)
    try:
        report = run(scn, cfg)
    except InfeasibleError as exc:
        print(f"hierarchical: agent infeasible: {exc}")
        return EXIT_INFEASIBLE
    x_h = report.x_star
    print(f"hierarchical: status={report.status} iterations={report.iterations}")
    try:
        sol = oracle.solve_monolithic(scn)
    except oracle.OracleInfeasible as exc:
        print(f"monolithic: infeasible ({exc.constraint_class}): {exc}")
        return EXIT_INFEASIBLE
    obj_h, obj_m = scn.objective(x_h), sol.objective
    gap = (obj_h - obj_m) / max(abs(obj_m), 1e-12)
    viol_h, viol_m = scn.constraint_violation(x_h), scn.constraint_violation(sol.x)
    print(f"hierarchical objective = {obj_h:.6f}  max violation = {viol_h:.3e}")
    print(f"monolithic   objective = {obj_m:.6f}  max violation = {viol_m:.3e}")
    print(f"relative gap = {gap:.3e}")
    if not report.converged:
        return EXIT_NOT_CONVERGED
    ok = abs(gap) <= args.gap and viol_h <= 1.5 * cfg.tol and viol_m <= 1e-6
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_THRESHOLD


# -- parser ----------------------------------------------------------------


def _levels(v: str) -> int:
    n = int(v)
    if not 2 <= n <= 5:
        raise argparse.ArgumentTypeError(f"levels must be in [2, 5], got {n}")
    return n


def _solver_flags(p):
    p.add_argument("--rho", type=float, default=1.0, help="augmented Lagrangian parameter")
    p.add_argument("--tol", type=float, default=1e-2, help="primal residual tolerance")
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--mode", choices=("parallel", "sequential"), default="parallel")
    p.add_argument("--backend", choices=("batched", "dense"), default="batched",
                   help="agent subproblem solver")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hieradmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a random scenario file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--levels", type=_levels, default=3)
    g.add_argument("--out", required=True)
    g.add_argument("--example-case", action="store_true",
                   help="4 levels with one aggregator on each of the first three")
    g.add_argument("--horizon", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--max-leaves-per-branch", type=int)
    g.add_argument("--max-branch-children", type=int)
    g.add_argument("--voltage-probability", type=float)
    g.add_argument("--cap-fraction", type=float, nargs=2, metavar=("LO", "HI"))
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="solve one scenario")
    r.add_argument("--scenario", required=True)
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
    r.add_argument("--svg", action="store_true", help="also write residual and aggregate charts")
    _solver_flags(r)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("batch", help="scaling study over random scenarios")
    b.add_argument("--count", type=int, default=50)
    b.add_argument("--levels-min", type=int, default=2)
    b.add_argument("--levels-max", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--horizon", type=int, default=96)
    b.add_argument("--dt", type=float, help="step length in hours (default: 24 h / horizon)")
    _solver_flags(b)
    b.set_defaults(func=cmd_batch)

    v = sub.add_parser("verify", help="compare against the centralized solution")
    v.add_argument("--scenario", required=True)
    v.add_argument("--gap", type=float, default=0.01, help="allowed relative objective gap")
    _solver_flags(v)
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
