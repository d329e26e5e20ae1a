"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .pipeline import (
    EXIT_IO,
    EXIT_OK,
    EXIT_SCENARIO,
    PipelineError,
    build_context,
    build_manifest,
    check_theory,
    estimate,
    evaluate_policy,
    run_pipeline,
    solve,
    write_json,
)
from .scenario import ScenarioError, bundled_scenarios, load_scenario

log = logging.getLogger("reachavoid")

COMMANDS = ("discretize", "tighten", "grid", "kernel", "solve", "eval", "pareto", "run", "report")

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--scenario", help="scenario JSON file or bundled scenario name")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="root seed (overrides the scenario)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for sampling and evaluation")
    p.add_argument("--cache", type=Path, help="directory for cached kernel samples")
    p.add_argument("--certificate-mode", action="store_true", help="treat every precondition as a hard error")
    p.add_argument("--trials", type=int, help="closed-loop evaluation runs (overrides the scenario)")
    p.add_argument("--samples", type=int, help="kernel samples per action (overrides the scenario)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.add_argument("-v", "--verbose", action="store_true")
    return p

def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="reachavoid", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--list", action="store_true", help="list bundled scenarios and exit")
    sub = parser.add_subparsers(dest="command")
    helps = {
        "discretize": "print the sampled-data matrices",
        "tighten": "print the tightening margins and constraint sets",
        "grid": "classify grid cells and write grid.csv",
        "kernel": "estimate (or load) the transition samples",
        "solve": "robust and plain value iteration",
        "eval": "solve, then run closed-loop evaluations",
        "pareto": "sweep the Lagrange multiplier on the constrained problem",
        "run": "full pipeline with reports and figures",
        "report": "re-render figures from an existing output directory",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser

def _scenario(args):
    if not args.scenario:
        raise ScenarioError("--scenario is required")
    sc = load_scenario(args.scenario)
    over = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ScenarioError("seed must be an unsigned 64-bit integer")
        over["seed"] = args.seed
    if args.trials is not None:
        over["trials"] = args.trials
    if args.samples is not None:
        over["samples"] = args.samples
    if args.certificate_mode:
        over["certificate"] = True
    return sc.with_overrides(**over) if over else sc

def _emit(obj, out: Path | None, name: str):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / name, obj)

def _progress(label):
    def cb(i, n):
        log.info("%s %d/%d", label, i, n)
    return cb

def _cmd_discretize(args):
    sc = _scenario(args)
    ctx = build_context(sc)
    d = ctx.discrete
    _emit({"delta_t": sc.time.delta_t, "A": d.A.tolist(), "B": d.B.tolist(), "E": d.E.tolist(), "n_s": d.n_s},
          args.out, "discretize.json")

def _cmd_tighten(args):
    ctx = build_context(_scenario(args))
    _emit({"tightening": ctx.params.to_dict(), "constraints": ctx.family.to_dict()}, args.out, "tighten.json")

def _cmd_grid(args):
    ctx = build_context(_scenario(args))
    g = ctx.grid
    summary = {"shape": list(g.shape), "cell_edge": g.zeta, "safe_cells": int(g.safe_indices.size),
               "target_cells": int(g.target_indices.size), "initial_cell": g.initial_index,
               "neighborhood_size": int(len(ctx.nbhd.offsets)), "digest": g.digest()}
    _emit(summary, args.out, "grid.json")
    if args.out is not None:
        C = g.centers()
        with open(args.out / "grid.csv", "w") as fh:
            fh.write("cell," + ",".join(f"c{i}" for i in range(g.dim)) + ",class\n")
            for i in range(g.n_cells):
                fh.write(f"{i}," + ",".join(repr(float(v)) for v in C[i]) + f",{int(g.classes[i])}\n")

def _kernel(args, ctx):
    return estimate(ctx, args.cache, args.threads, _progress("kernel action"))

def _cmd_kernel(args):
    ctx = build_context(_scenario(args))
    model = _kernel(args, ctx)
    rows = model.kernel(ctx.grid, ctx.scenario.cost, ctx.scenario.time.delta_t)
    _emit({"mode": model.mode, "samples": ctx.scenario.samples, "actions": ctx.n_actions,
           "infeasible_samples": int(model.header.get("infeasible_samples", 0)), "rows_digest": rows.digest()},
          args.out, "kernel.json")
    check_theory(ctx, model, None)

def _cmd_solve(args):
    from .dp import save_tables
    from .reports import table_header, write_value_field

    ctx = build_context(_scenario(args))
    model = _kernel(args, ctx)
    sol = solve(ctx, model)
    man = build_manifest(ctx, model, sol, None)
    _emit(man["values"], args.out, "values.json")
    if args.out is not None:
        write_value_field(args.out / "value_field.csv", ctx.grid, sol.values, sol.plain_values, sol.policy)
        save_tables(args.out / "tables.npz", sol.values, sol.policy, table_header(ctx, sol))
    check_theory(ctx, model, None)

def _cmd_eval(args):
    from .reports import write_outcomes, write_results, write_trajectories

    ctx = build_context(_scenario(args))
    model = _kernel(args, ctx)
    sol = solve(ctx, model)
    report = evaluate_policy(ctx, sol.policy, ctx.scenario.trials, threads=args.threads)
    man = build_manifest(ctx, model, sol, report)
    _emit({"values": man["values"], "evaluation": man.get("evaluation"),
           "lower_bound_check": man.get("lower_bound_check")}, args.out, "evaluation.json")
    if args.out is not None:
        write_results(args.out / "results.csv", ctx.scenario.name, man)
        write_outcomes(args.out / "outcomes.csv", report)
        write_trajectories(args.out / "trajectories", report, ctx.scenario.time.delta_t)
    check_theory(ctx, model, report)

def _cmd_pareto(args):
    from .dp import pareto_monotone_chain, pareto_sweep, reach_monotone_in_kappa
    from .reports import write_pareto

    ctx = build_context(_scenario(args))
    sc = ctx.scenario
    if not sc.kappas or sc.cost is None:
        raise ScenarioError("scenario declares no constrained problem (kappas and cost)")
    model = _kernel(args, ctx)
    sol = solve(ctx, model)
    points, policies = pareto_sweep(sol.rows, ctx.grid, sc.kappas, sc.time.N, ctx.nbhd, sc.alpha)
    reports = [evaluate_policy(ctx, p, sc.pareto_trials, threads=args.threads) for p in policies] \
        if sc.pareto_trials else None
    _emit({"points": [vars(p) for p in points], "monotone_chain": pareto_monotone_chain(points),
           "reach_monotone_in_kappa": reach_monotone_in_kappa(points)}, args.out, "pareto.json")
    if args.out is not None:
        write_pareto(args.out / "pareto.csv", points, reports)

def _cmd_run(args):
    if args.out is None:
        raise ScenarioError("--out is required for run")
    sc = _scenario(args)
    man = run_pipeline(sc, args.out, args.cache, args.threads, figures=not args.no_figures,
                       progress=_progress("kernel action"))
    print(json.dumps({"values": man["values"], "evaluation": man.get("evaluation"),
                      "lower_bound_check": man.get("lower_bound_check")}, indent=2, sort_keys=True))

def _cmd_report(args):
    from .reports import render_figures

    if args.out is None:
        raise ScenarioError("--out is required for report")
    if not (args.out / "manifest.json").exists():
        raise OSError(f"no manifest.json in {args.out}; run the pipeline first")
    for p in render_figures(args.out):
        print(p)

HANDLERS = {name: globals()[f"_cmd_{name}"] for name in COMMANDS}

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list:
        print("\n".join(bundled_scenarios()))
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_SCENARIO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](args)
    except ScenarioError as exc:
        print(f"error [scenario]: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except PipelineError as exc:
        print(f"error {exc} (code {exc.code})", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())
