"""End-to-end orchestration: tighten, grid, sample, solve, evaluate, report."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .abstraction import (
    SAFE,
    TRANSLATION,
    PER_STATE,
    GridAbstraction,
    KernelRows,
    NeighborhoodIndex,
    TransitionModel,
    build_grid,
    build_neighborhoods,
    clopper_pearson,
    estimate_kernel,
    full_path,
    load_model,
    pack_samples,
    save_model,
)
from .dp import (
    NO_OP,
    Policy,
    ValueTable,
    pareto_sweep,
    plain_value_iteration,
    robust_value_iteration,
    table_digest,
)
from .geometry import contains_points
from .lti import STREAM_COMMANDS, STREAM_EVAL, STREAM_KERNEL, DiscreteLti, FineStepper, derive_rng, discretize
from .mpc import (
    ANCHOR_D_TOL,
    ROBUST,
    BlockRunner,
    CommandParams,
    CommandSet,
    MpcConfig,
    MpcController,
    MpcError,
    MpcProblemCache,
)
from .scenario import Scenario, ScenarioError, parse_scenario
from .tightening import (
    ConstraintFamily,
    TighteningError,
    TighteningParams,
    build_constraint_family,
    tightening_params,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_THEORY = 3
EXIT_IO = 4


class PipelineError(RuntimeError):
    def __init__(self, stage: str, code: int, message: str):
        self.stage, self.code = stage, code
        super().__init__(f"[{stage}] {message}")


class TheoryViolation(PipelineError):
    def __init__(self, stage: str, message: str):
        super().__init__(stage, EXIT_THEORY, message)


@dataclass(eq=False)
class Context:
    scenario: Scenario
    discrete: DiscreteLti
    params: TighteningParams
    family: ConstraintFamily
    mpc: MpcConfig
    cache: MpcProblemCache
    stepper: FineStepper
    commands: CommandSet
    runner: BlockRunner
    grid: GridAbstraction
    nbhd: NeighborhoodIndex
    hold_action: int
    timings: dict = field(default_factory=dict)

    @property
    def n_actions(self) -> int:
        return len(self.commands) - 1

    def center_of(self, position) -> np.ndarray:
        """Full-state anchor for the cell containing ``position`` (lattice extended past the grid)."""
        g = self.grid
        p = np.asarray(position, dtype=float)
        idx = np.ceil((p - g.lo) / g.zeta) - 1
        c = np.zeros(self.discrete.n)
        c[: g.dim] = g.lo + (idx + 0.5) * g.zeta
        return c


def build_context(scenario: Scenario) -> Context:
    sc = scenario
    sys = sc.system
    timings = {}
    t0 = time.perf_counter()
    if not sys.positions_decoupled():
        log.info("stochastic states feed the dynamics; per-state kernel estimation will be used")
    d = discretize(sys, sc.time.delta_t)
    timings["discretize"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    try:
        params = tightening_params(sys, sc.g_d, sc.time.delta_t, sc.time.Delta_t, sc.cell_edge, sc.kappa_x)
        family = build_constraint_family(sc.g_d, params, "zero", tilde_equals_hat=sc.tilde_equals_hat)
    except TighteningError as exc:
        raise PipelineError("tighten", EXIT_SCENARIO, str(exc)) from exc
    timings["tighten"] = time.perf_counter() - t0
    xd0 = sc.x0[sys.n_s:]
    if np.max(np.abs(xd0), initial=0.0) > ANCHOR_D_TOL:
        msg = "initial deterministic state is not in the terminal set x^d = 0"
        if sc.certificate:
            raise PipelineError("scenario", EXIT_SCENARIO, msg)
        log.warning(msg)
    cfg = MpcConfig(d, sc.Q, sc.R, sc.time.J, family, sys.input_set, ROBUST)
    cache = MpcProblemCache(cfg)
    stepper = FineStepper(sys, sc.time.delta_t, float(sc.time.sim_step))
    params_list = sc.command_params()
    hold = CommandParams((0.0, 0.0), tuple(float(sc.Q[i, i]) for i in sc.position_indices))
    commands = CommandSet(params_list + [hold], sc.time, sc.position_indices, sc.velocity_indices)
    runner = BlockRunner(cfg, stepper, sc.noise, commands, sc.cell_edge, cache)
    t0 = time.perf_counter()
    grid = build_grid(sc.safe_set, sc.target_set, sc.bounds, sc.cell_edge, params.r, sc.x0[: sys.n_s])
    nbhd = build_neighborhoods(grid, params.r)
    timings["grid"] = time.perf_counter() - t0
    return Context(sc, d, params, family, cfg, cache, stepper, commands, runner, grid, nbhd,
                   len(params_list), timings)


# -- parallel helpers ---------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(raw: dict):
    logging.getLogger("reachavoid").setLevel(logging.ERROR)
    _WORKER["ctx"] = build_context(parse_scenario(raw))


def _pool(threads: int, raw: dict):
    return ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(raw,))


def _chunks(n: int, parts: int):
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


# -- kernel -------------------------------------------------------------------------


KERNEL_KEYS = ("system", "time", "noise", "constraints", "grid", "commands", "command_indices", "mpc",
               "kernel", "seeds")


def dynamics_digest(sc: Scenario) -> str:
    """Hash of every scenario field the translation-invariant samples depend on (not the geometry)."""
    sub = {k: sc.raw.get(k) for k in KERNEL_KEYS}
    return hashlib.sha256(json.dumps(sub, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def kernel_header(ctx: Context) -> dict:
    sc = ctx.scenario
    return {"dynamics": dynamics_digest(sc), "seed": sc.seed, "K": sc.samples, "actions": ctx.n_actions,
            "cell_edge": sc.cell_edge, "version": __version__}


def kernel_cache_path(ctx: Context, cache_dir) -> Path:
    return Path(cache_dir) / f"kernel-{dynamics_digest(ctx.scenario)[:16]}.npz"


def estimate(ctx: Context, cache_dir=None, threads: int = 1, progress=None) -> TransitionModel:
    """Kernel samples, loaded from ``cache_dir`` when the header matches.

    Only translation-invariant sample sets are cached; they do not depend on
    the scenario geometry, so scenarios sharing dynamics share one file.
    """
    sc = ctx.scenario
    hdr = kernel_header(ctx)
    mode = TRANSLATION if sc.system.positions_decoupled() else PER_STATE
    path = kernel_cache_path(ctx, cache_dir) if cache_dir is not None and mode == TRANSLATION else None
    if path is not None and path.exists():
        try:
            model = load_model(path, hdr)
        except (OSError, ValueError, KeyError) as exc:
            raise PipelineError("kernel", EXIT_IO, f"cannot read kernel cache {path}: {exc}") from exc
        if model is not None:
            ctx.timings["kernel"] = 0.0
            ctx.timings["kernel_cache_hit"] = True
            return model
    t0 = time.perf_counter()
    if mode == TRANSLATION and threads > 1:
        model = _estimate_parallel(ctx, threads)
    else:
        model = estimate_kernel(ctx.grid, ctx.runner, ctx.n_actions, sc.samples, sc.seed, sc.system.n_s,
                                mode=mode, cost_fn=sc.cost, delta_t=sc.time.delta_t, progress=progress)
    ctx.timings["kernel"] = time.perf_counter() - t0
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            save_model(tmp, model, hdr)
            os.replace(tmp, path)
        except OSError as exc:
            raise PipelineError("kernel", EXIT_IO, f"cannot write kernel cache {path}: {exc}") from exc
    return model


def _estimate_parallel(ctx: Context, threads: int) -> TransitionModel:
    """Split actions across processes; streams are keyed by the global action index."""
    sc = ctx.scenario
    with _pool(threads, sc.raw) as ex:
        futs = [ex.submit(_kernel_paths, lo, hi) for lo, hi in _chunks(ctx.n_actions, threads)]
        parts = [f.result() for f in futs]
    paths = [row for p, _ in parts for row in p]
    infeasible = np.concatenate([inf for _, inf in parts])
    samples = pack_samples(paths, infeasible, ctx.grid.zeta, ctx.stepper.substeps)
    return TransitionModel(TRANSLATION, samples=samples,
                           header={"infeasible_samples": int(infeasible.sum()), "K": sc.samples,
                                   "actions": ctx.n_actions})


def _kernel_paths(lo: int, hi: int):
    """Worker: fine displacement paths for actions ``lo..hi-1``, same streams as the serial path."""
    ctx = _WORKER["ctx"]
    sc = ctx.scenario
    n, ns = sc.system.n, sc.system.n_s
    length = sc.time.J * ctx.stepper.substeps + 1
    paths, infeasible = [], np.zeros((hi - lo, sc.samples), dtype=bool)
    for a in range(lo, hi):
        row = []
        for s in range(sc.samples):
            rng = derive_rng(sc.seed, STREAM_KERNEL, a, s)
            res = ctx.runner.run(np.zeros(n), a, rng, center=np.zeros(n))
            row.append(full_path(res.states[:, :ns], length))
            infeasible[a - lo, s] = res.infeasible
        paths.append(row)
    return paths, infeasible


# -- solve --------------------------------------------------------------------------


@dataclass(eq=False)
class Solution:
    rows: KernelRows
    values: ValueTable
    policy: Policy
    plain_values: ValueTable

    def v0(self, grid: GridAbstraction) -> float:
        return float(self.values.values[0, grid.initial_index])


def solve(ctx: Context, model: TransitionModel) -> Solution:
    sc = ctx.scenario
    t0 = time.perf_counter()
    rows = model.kernel(ctx.grid, sc.cost, sc.time.delta_t)
    ctx.timings["rows"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    values, policy = robust_value_iteration(rows, ctx.grid, ctx.nbhd, sc.time.N)
    plain, _ = plain_value_iteration(rows, ctx.grid, sc.time.N)
    ctx.timings["dp"] = time.perf_counter() - t0
    return Solution(rows, values, policy, plain)


# -- evaluation ---------------------------------------------------------------------


@dataclass(eq=False)
class EvalReport:
    trials: int
    success: np.ndarray
    decided_step: np.ndarray
    infeasible: np.ndarray
    g_violations: np.ndarray
    landing_failures: np.ndarray
    objective: np.ndarray
    actions: np.ndarray
    trajectories: np.ndarray
    inputs: np.ndarray
    events: list

    @property
    def successes(self) -> int:
        return int(self.success.sum())

    @property
    def v_hat(self) -> float:
        return self.successes / self.trials if self.trials else float("nan")

    def ci(self, level: float = 0.99):
        lo, hi = clopper_pearson(self.successes, self.trials, level)
        return float(lo), float(hi)

    def upper(self, level: float = 0.99) -> float:
        return float(clopper_pearson(self.successes, self.trials, level, side="upper")[1])

    def eps(self, level: float = 0.99) -> float:
        return self.upper(level) - self.v_hat

    def summary(self) -> dict:
        if self.trials == 0:
            return {"trials": 0}
        lo, hi = self.ci()
        return {"trials": self.trials, "successes": self.successes, "V_hat_0": self.v_hat,
                "ci99": [lo, hi], "upper99_one_sided": self.upper(), "eps99": self.eps(),
                "g_violations": int(self.g_violations.sum()), "infeasible_runs": int(self.infeasible.sum()),
                "terminal_landing_failures": int(self.landing_failures.sum()),
                "mean_objective": float(np.mean(self.objective))}


def _first_exit(P, safe_set, target_set):
    """Index of the first point in the target or outside the safe set; (index, success) or None."""
    in_t = contains_points(target_set, P) if target_set is not None else np.zeros(len(P), dtype=bool)
    out_s = ~contains_points(safe_set, P)
    hit = in_t | out_s
    if not hit.any():
        return None
    i = int(np.argmax(hit))
    return i, bool(in_t[i])


def run_trial(ctx: Context, policy_actions: np.ndarray, trial: int, root: int) -> dict:
    sc = ctx.scenario
    sys = sc.system
    ns, N, J = sys.n_s, sc.time.N, sc.time.J
    S = ctx.stepper.substeps
    H, b = sc.g_d.normals, sc.g_d.offsets
    safe_set, target_set = sc.safe_set, sc.target_set
    grid = ctx.grid
    policy = Policy(policy_actions)
    rng = derive_rng(root, STREAM_EVAL, trial)
    ctrl = MpcController(ctx.mpc, ctx.cache, sc.cell_edge)
    x = sc.x0.copy()
    nodes = np.full((N * J + 1, sys.n), np.nan)
    nodes[0] = x
    inputs = np.full((N * J, sys.m), np.nan)
    actions = np.full(N, NO_OP, dtype=np.int32)
    out = {"success": False, "decided": -1, "infeasible": False, "g_viol": 0, "landing": 0,
           "objective": 0.0, "event": None}
    first = _first_exit(x[None, :ns], safe_set, target_set)
    decided = first is not None
    if decided:
        out["success"], out["decided"] = first[1], 0
    last = None
    for k in range(N):
        if k > 0 and np.max(np.abs(x[ns:]), initial=0.0) > 1e-6:
            out["landing"] += 1
        cell = int(grid.locate(x[:ns])[0])
        a = NO_OP
        if not decided and cell >= 0 and grid.classes[cell] == SAFE:
            a = policy(k, cell)
        if a == NO_OP:
            a = last if last is not None else ctx.hold_action
        actions[k] = a
        last = a
        try:
            res = ctx.runner.run(x, a, rng, center=ctx.center_of(x[:ns]), k=k, controller=ctrl)
        except MpcError as exc:
            out["infeasible"], out["event"] = True, {"trial": trial, "k": k, "message": str(exc)}
            break
        fine = res.states[1:]
        if len(fine):
            out["g_viol"] += int(np.sum(np.any(fine[:, ns:] @ H.T > b, axis=1)))
        if not decided and len(fine):
            hit = _first_exit(fine[:, :ns], safe_set, target_set)
            stop = len(fine) if hit is None else hit[0]
            if sc.cost is not None:
                node_idx = np.arange(0, J * S, S)
                node_idx = node_idx[node_idx <= stop]
                out["objective"] += float(np.sum(sc.cost.masked(res.states[node_idx, :ns], safe_set, target_set))
                                          * sc.time.delta_t)
            if hit is not None:
                decided = True
                out["success"] = hit[1]
                out["decided"] = k * J * S + hit[0] + 1
        if res.infeasible:
            f = res.failure
            out["infeasible"] = True
            out["event"] = {"trial": trial, "k": k, "j": f.j, "status": f.status,
                            "residuals": list(f.residuals)}
            nodes[k * J + 1: k * J + 1 + len(res.states[S::S])] = res.states[S::S]
            inputs[k * J: k * J + len(res.inputs)] = res.inputs
            break
        nodes[k * J + 1:(k + 1) * J + 1] = res.states[S::S]
        inputs[k * J:(k + 1) * J] = res.inputs
        x = res.states[-1]
    if out["infeasible"]:
        out["success"] = False
    out["nodes"] = nodes
    out["inputs"] = inputs
    out["actions"] = actions
    return out


def _eval_range(policy_actions, lo, hi, root):
    ctx = _WORKER["ctx"]
    return [run_trial(ctx, policy_actions, t, root) for t in range(lo, hi)]


def evaluate_policy(ctx: Context, policy: Policy, trials: int, seed: int | None = None,
                    threads: int = 1, progress=None) -> EvalReport:
    root = ctx.scenario.seed if seed is None else seed
    t0 = time.perf_counter()
    results = []
    if threads > 1 and trials > 1:
        parts = _chunks(trials, threads * 4)
        with _pool(threads, ctx.scenario.raw) as ex:
            futs = [ex.submit(_eval_range, policy.actions, lo, hi, root) for lo, hi in parts]
            for f in futs:
                results.extend(f.result())
    else:
        for t in range(trials):
            results.append(run_trial(ctx, policy.actions, t, root))
            if progress:
                progress(t + 1, trials)
    ctx.timings["evaluate"] = ctx.timings.get("evaluate", 0.0) + time.perf_counter() - t0
    n = ctx.scenario.system.n
    NJ = ctx.scenario.time.N * ctx.scenario.time.J
    return EvalReport(
        trials=trials,
        success=np.array([r["success"] for r in results], dtype=bool),
        decided_step=np.array([r["decided"] for r in results], dtype=np.int64),
        infeasible=np.array([r["infeasible"] for r in results], dtype=bool),
        g_violations=np.array([r["g_viol"] for r in results], dtype=np.int64),
        landing_failures=np.array([r["landing"] for r in results], dtype=np.int64),
        objective=np.array([r["objective"] for r in results]),
        actions=np.array([r["actions"] for r in results], dtype=np.int32).reshape(trials, ctx.scenario.time.N),
        trajectories=np.array([r["nodes"] for r in results]).reshape(trials, NJ + 1, n),
        inputs=np.array([r["inputs"] for r in results]).reshape(trials, NJ, ctx.scenario.system.m),
        events=[r["event"] for r in results if r["event"] is not None],
    )


# -- full run -----------------------------------------------------------------------


def row_ci_summary(rows: KernelRows, grid: GridAbstraction, level: float = 0.99) -> dict:
    """Clopper-Pearson half-widths of the per-row target probabilities (informational)."""
    safe = grid.safe_indices
    if rows.target_counts is None or safe.size == 0:
        return {}
    k = rows.target_counts[:, safe].ravel()
    lo, hi = clopper_pearson(k, rows.n_samples, level)
    half = 0.5 * (hi - lo)
    return {"level": level, "rows": int(k.size), "mean_halfwidth": float(np.mean(half)),
            "max_halfwidth": float(np.max(half))}


def build_manifest(ctx: Context, model: TransitionModel, sol: Solution, report: EvalReport | None,
                   pareto=None, pareto_reports=None) -> dict:
    sc = ctx.scenario
    g = ctx.grid
    v0 = sol.v0(g)
    man = {
        "software": {"package": "reachavoid", "version": __version__},
        "scenario": {"name": sc.name, "digest": sc.digest(), "reconstructed": sc.reconstructed},
        "certificate_mode": sc.certificate,
        "seeds": {"root": sc.seed, "streams": {"kernel": STREAM_KERNEL, "evaluation": STREAM_EVAL,
                                               "commands": STREAM_COMMANDS}},
        "time": {"T": float(sc.time.T), "N": sc.time.N, "J": sc.time.J, "Delta_t": sc.time.Delta_t,
                 "delta_t": sc.time.delta_t, "sim_step": float(sc.time.sim_step)},
        "tightening": ctx.params.to_dict(),
        "constraints": ctx.family.to_dict(),
        "grid": {"cell_edge": g.zeta, "shape": list(g.shape), "safe_cells": int(g.safe_indices.size),
                 "target_cells": int(g.target_indices.size), "initial_cell": g.initial_index,
                 "neighborhood_size": int(len(ctx.nbhd.offsets)), "digest": g.digest()},
        "commands": [p.to_list() for p in ctx.commands.params[: ctx.n_actions]],
        "command_indices": {"position": list(sc.position_indices), "velocity": list(sc.velocity_indices)},
        "kernel": {"mode": model.mode, "samples": sc.samples, "actions": ctx.n_actions,
                   "infeasible_samples": int(model.header.get("infeasible_samples", 0)),
                   "rows_digest": sol.rows.digest(), "row_ci": row_ci_summary(sol.rows, g)},
        "values": {"V_tilde_0": v0, "V_plain_0": float(sol.plain_values.values[0, g.initial_index]),
                   "N": sc.time.N, "tables_digest": table_digest(sol.values, sol.policy)},
    }
    if report is not None:
        ev = report.summary()
        man["evaluation"] = ev
        if report.trials:
            man["lower_bound_check"] = {"V_tilde_0": v0, "upper99_one_sided": ev["upper99_one_sided"],
                                        "holds": bool(v0 <= ev["upper99_one_sided"])}
    if pareto is not None:
        man["pareto"] = [vars(p) for p in pareto]
        if pareto_reports:
            man["pareto_evaluation"] = [r.summary() for r in pareto_reports]
    return man


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def check_theory(ctx: Context, model: TransitionModel, report: EvalReport | None) -> None:
    """In certificate mode, any infeasibility or constraint violation is fatal."""
    if not ctx.scenario.certificate:
        return
    bad = int(model.header.get("infeasible_samples", 0))
    if bad:
        raise TheoryViolation("kernel", f"{bad} kernel samples hit an infeasible MPC problem")
    if report is not None:
        if report.infeasible.any():
            raise TheoryViolation("evaluate", f"{int(report.infeasible.sum())} runs hit an infeasible MPC problem")
        if report.g_violations.any():
            raise TheoryViolation("evaluate", f"{int(report.g_violations.sum())} constraint violations")


def run_pipeline(scenario: Scenario, out_dir, cache_dir=None, threads: int = 1, with_pareto: bool = True,
                 figures: bool = True, progress=None) -> dict:
    from .reports import emit_reports

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError("report", EXIT_IO, str(exc)) from exc
    try:
        ctx = build_context(scenario)
    except ScenarioError as exc:
        raise PipelineError("scenario", EXIT_SCENARIO, str(exc)) from exc
    model = estimate(ctx, cache_dir, threads, progress)
    sol = solve(ctx, model)
    report = evaluate_policy(ctx, sol.policy, scenario.trials, threads=threads)
    pareto = pareto_reports = None
    pareto_policies = None
    if with_pareto and scenario.kappas and sol.rows.cost is not None:
        t0 = time.perf_counter()
        pareto, pareto_policies = pareto_sweep(sol.rows, ctx.grid, scenario.kappas, scenario.time.N, ctx.nbhd,
                                               scenario.alpha)
        ctx.timings["pareto"] = time.perf_counter() - t0
        if scenario.pareto_trials:
            pareto_reports = [evaluate_policy(ctx, p, scenario.pareto_trials, threads=threads)
                              for p in pareto_policies]
    manifest = build_manifest(ctx, model, sol, report, pareto, pareto_reports)
    try:
        emit_reports(out, ctx, sol, report, manifest, pareto, figures=figures, pareto_reports=pareto_reports)
        write_json(out / "timings.json", {k: (round(v, 3) if isinstance(v, float) else v)
                                          for k, v in ctx.timings.items()})
    except OSError as exc:
        raise PipelineError("report", EXIT_IO, str(exc)) from exc
    check_theory(ctx, model, report)
    return manifest


def default_threads() -> int:
    return max(1, min(8, os.cpu_count() or 1))
