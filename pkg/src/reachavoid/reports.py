"""Plot-ready CSV, JSON and PNG outputs of a pipeline run."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .dp import save_tables
from .geometry import HalfspacePolytope, outline, region_from_dict, region_to_dict
from .tightening import polytope_vertices

TRAJECTORY_FILES = 100

RESULT_COLUMNS = ["scenario", "V_tilde_0", "V_plain_0", "V_hat_0", "ci99_lo", "ci99_hi", "upper99_one_sided",
                  "eps99", "trials", "successes", "infeasible_runs", "g_violations"]
PARETO_COLUMNS = ["kappa", "expected_cost", "reach_prob", "certified_reach", "objective", "empirical_reach",
                  "empirical_cost"]
OUTCOME_COLUMNS = ["trial", "success", "decided_step", "infeasible", "g_violations", "landing_failures",
                   "objective"]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def write_results(path: Path, name: str, manifest: dict) -> None:
    ev = manifest.get("evaluation", {})
    vals = manifest["values"]
    rows = []
    if ev.get("trials"):
        rows.append([name, vals["V_tilde_0"], vals["V_plain_0"], ev["V_hat_0"], ev["ci99"][0], ev["ci99"][1],
                     ev["upper99_one_sided"], ev["eps99"], ev["trials"], ev["successes"], ev["infeasible_runs"],
                     ev["g_violations"]])
    _write_csv(path, RESULT_COLUMNS, rows)


def write_value_field(path: Path, grid, values, plain_values, policy) -> None:
    """One row per safe cell: index, centre, certified and plain stage-0 values, stage-0 action."""
    safe = grid.safe_indices
    C = grid.centers(safe)
    d = grid.dim
    header = ["cell"] + [f"c{i}" for i in range(d)] + ["V_tilde_0", "V_plain_0", "action_0"]
    rows = []
    for t, i in enumerate(safe):
        rows.append([int(i), *C[t], values.values[0, i], plain_values.values[0, i], int(policy.actions[0, i])])
    _write_csv(path, header, rows)


def write_pareto(path: Path, points, reports=None) -> None:
    rows = []
    for i, p in enumerate(points or []):
        emp = reports[i] if reports else None
        rows.append([p.kappa, p.expected_cost, p.reach_prob, p.certified_reach, p.objective,
                     emp.v_hat if emp is not None and emp.trials else float("nan"),
                     float(np.mean(emp.objective)) if emp is not None and emp.trials else float("nan")])
    _write_csv(path, PARETO_COLUMNS, rows)


def write_outcomes(path: Path, report) -> None:
    rows = []
    if report is not None:
        for t in range(report.trials):
            rows.append([t, bool(report.success[t]), int(report.decided_step[t]), bool(report.infeasible[t]),
                         int(report.g_violations[t]), int(report.landing_failures[t]), report.objective[t]])
    _write_csv(path, OUTCOME_COLUMNS, rows)


def write_trajectories(folder: Path, report, delta_t: float, limit: int = TRAJECTORY_FILES) -> None:
    """Per-trajectory CSVs at inner-step resolution: time, state, input held from that time, command."""
    folder.mkdir(parents=True, exist_ok=True)
    if report is None:
        return
    N = report.actions.shape[1]
    J = (report.trajectories.shape[1] - 1) // max(N, 1)
    for t in range(min(limit, report.trials)):
        X = report.trajectories[t]
        U = report.inputs[t]
        n, m = X.shape[1], U.shape[1]
        header = ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + ["action"]
        rows = []
        for s in np.flatnonzero(~np.isnan(X).any(axis=1)):
            u = U[s] if s < len(U) and not np.isnan(U[s]).any() else U[s - 1] if s else np.zeros(m)
            k = min(s // J, N - 1) if J else 0
            rows.append([s * delta_t, *X[s], *u, int(report.actions[t, k])])
        _write_csv(folder / f"trajectory_{t:04d}.csv", header, rows)


def table_header(ctx, sol, kappa=None) -> dict:
    return {"scenario": ctx.scenario.digest(), "grid": ctx.grid.digest(), "model": sol.rows.digest(),
            "kappa": kappa}


def write_events(path: Path, report) -> None:
    """Controller failure events, one JSON object per line (empty when every solve succeeded)."""
    with open(path, "w") as fh:
        for ev in (report.events if report is not None else []):
            fh.write(json.dumps(ev, sort_keys=True) + "\n")


def geometry_document(scenario, grid) -> dict:
    """Outline description of the scenario for overlay plots."""
    feats = []
    for kind, regions in (("obstacle", scenario.obstacles), ("target", scenario.targets)):
        for r in regions:
            feats.append({"kind": kind, "region": region_to_dict(r), "outline": outline(r)})
    b = scenario.bounds
    return {"bounds": {"lo": b.lo.tolist(), "hi": b.hi.tolist()}, "initial_state": scenario.x0.tolist(),
            "grid": {"lo": np.asarray(grid.lo).tolist(), "shape": list(grid.shape), "cell_edge": grid.zeta},
            "features": feats}


def polygons(region, resolution: int = 64) -> list[np.ndarray]:
    """Closed 2-D vertex loops for the primitive members of ``region``."""
    out = []
    for rec in outline(region, resolution):
        if rec["kind"] == "box":
            (x0, y0), (x1, y1) = rec["lo"], rec["hi"]
            out.append(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
        elif rec["kind"] == "ball":
            th = np.linspace(0, 2 * np.pi, resolution, endpoint=False)
            out.append(np.asarray(rec["center"]) + rec["radius"] * np.c_[np.cos(th), np.sin(th)])
        else:
            V = polytope_vertices(HalfspacePolytope(np.asarray(rec["normals"]), np.asarray(rec["offsets"])))
            c = V.mean(axis=0)
            out.append(V[np.argsort(np.arctan2(V[:, 1] - c[1], V[:, 0] - c[0]))])
    return out


def emit_reports(out: Path, ctx, sol, report, manifest: dict, pareto=None, figures: bool = True,
                 pareto_reports=None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sc = ctx.scenario
    write_results(out / "results.csv", sc.name, manifest)
    write_value_field(out / "value_field.csv", ctx.grid, sol.values, sol.plain_values, sol.policy)
    save_tables(out / "tables.npz", sol.values, sol.policy, table_header(ctx, sol))
    write_pareto(out / "pareto.csv", pareto, pareto_reports)
    write_outcomes(out / "outcomes.csv", report)
    write_trajectories(out / "trajectories", report, sc.time.delta_t)
    write_events(out / "events.jsonl", report)
    with open(out / "geometry.json", "w") as fh:
        json.dump(geometry_document(sc, ctx.grid), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if figures and ctx.grid.dim == 2:
        render_figures(out)


# -- figures ------------------------------------------------------------------------


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]]).reshape(len(rows) - 1, len(rows[0]))


def _draw_geometry(ax, geo: dict):
    from matplotlib.patches import Polygon

    colours = {"obstacle": "0.3", "target": "tab:green"}
    for f in geo["features"]:
        c = colours.get(f["kind"], "k")
        for poly in polygons(region_from_dict(f["region"])):
            ax.add_patch(Polygon(poly, closed=True, facecolor=c, alpha=0.5, edgecolor=c))
    b = geo["bounds"]
    ax.set_xlim(b["lo"][0], b["hi"][0])
    ax.set_ylim(b["lo"][1], b["hi"][1])
    ax.set_aspect("equal")


def render_figures(out) -> list[Path]:
    """Render PNG figures from the CSV and JSON files already in ``out``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    geo = json.loads((out / "geometry.json").read_text())
    man = json.loads((out / "manifest.json").read_text())
    name = man["scenario"]["name"]
    written = []
    g = geo["grid"]
    lo, shape, zeta = np.asarray(g["lo"]), tuple(g["shape"]), g["cell_edge"]
    if len(shape) != 2:
        return written
    x0 = geo["initial_state"]

    header, V = _read_csv(out / "value_field.csv")
    img = np.full(shape, np.nan)
    if len(V):
        idx = np.unravel_index(V[:, 0].astype(int), shape)
        img[idx] = V[:, header.index("V_tilde_0")]
    ext = [lo[0], lo[0] + shape[0] * zeta, lo[1], lo[1] + shape[1] * zeta]
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(img.T, origin="lower", extent=ext, vmin=0, vmax=1, cmap="viridis")
    _draw_geometry(ax, geo)
    ax.plot(x0[0], x0[1], "r*", ms=10)
    fig.colorbar(im, ax=ax, label="certified value at stage 0")
    ax.set_title(f"{name}: certified reach-avoid value")
    written.append(out / "value_field.png")
    fig.savefig(written[-1], dpi=120, bbox_inches="tight")
    plt.close(fig)

    files = sorted((out / "trajectories").glob("trajectory_*.csv"))
    if files:
        _, outcomes = _read_csv(out / "outcomes.csv")
        px, py = man.get("command_indices", {}).get("position", [0, 1])[:2]
        fig, ax = plt.subplots(figsize=(5.5, 5))
        _draw_geometry(ax, geo)
        for t, f in enumerate(files):
            _, X = _read_csv(f)
            ok = bool(outcomes[t, 1]) if t < len(outcomes) else False
            ax.plot(X[:, 1 + px], X[:, 1 + py], lw=0.6, alpha=0.6, color="tab:blue" if ok else "tab:red")
        ax.plot(x0[0], x0[1], "k*", ms=10)
        n_ok = int(outcomes[:, 1].sum()) if len(outcomes) else 0
        ax.set_title(f"{name}: closed loop, {n_ok}/{len(outcomes)} reached")
        written.append(out / "trajectories.png")
        fig.savefig(written[-1], dpi=120, bbox_inches="tight")
        plt.close(fig)

    header, P = _read_csv(out / "pareto.csv")
    if len(P):
        k, cost = P[:, 0], P[:, 1]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(P[:, 3], cost, "o-", label="certified")
        ax.plot(P[:, 2], cost, "s--", label="abstraction")
        if np.isfinite(P[:, 5]).any():
            ax.plot(P[:, 5], P[:, 6], "^:", label="closed loop")
        for kk, x, y in zip(k, P[:, 3], cost):
            ax.annotate(f"{kk:g}", (x, y), fontsize=8)
        ax.set_xlabel("reach probability")
        ax.set_ylabel("expected cost")
        ax.legend()
        written.append(out / "pareto.png")
        fig.savefig(written[-1], dpi=120, bbox_inches="tight")
        plt.close(fig)
    return written
