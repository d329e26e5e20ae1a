import csv
import filecmp

import numpy as np
import pytest

from reachavoid.abstraction import TRANSLATION
from reachavoid.dp import NO_OP, Policy, load_tables
from reachavoid.geometry import HyperRect
from reachavoid.pipeline import (
    EXIT_SCENARIO,
    EXIT_THEORY,
    PipelineError,
    TheoryViolation,
    _first_exit,
    build_context,
    check_theory,
    dynamics_digest,
    estimate,
    evaluate_policy,
    kernel_cache_path,
    run_pipeline,
    solve,
)
from reachavoid.reports import PARETO_COLUMNS, RESULT_COLUMNS, render_figures
from reachavoid.scenario import load_scenario, parse_scenario

from .conftest import NEAR_TARGET, read_json, small_raw


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_first_hit_semantics_on_crafted_paths():
    safe = HyperRect.from_bounds([0, 0], [4, 4])
    target = HyperRect.from_bounds([3, 3], [4, 4])
    # passes through the target, then leaves the world: success
    P = np.array([[1, 1], [3.5, 3.5], [5, 5]], dtype=float)
    assert _first_exit(P, safe, target) == (1, True)
    # leaves the world before touching the target: failure
    P = np.array([[1, 1], [-0.1, 1], [3.5, 3.5]], dtype=float)
    assert _first_exit(P, safe, target) == (1, False)
    # never absorbed
    assert _first_exit(np.array([[1.0, 1.0], [2.0, 2.0]]), safe, target) is None
    # the target boundary counts as the target
    assert _first_exit(np.array([[3.0, 3.0]]), safe, target) == (0, True)


def test_context_pieces(small_scenario):
    ctx = build_context(small_scenario)
    assert ctx.n_actions == 4
    assert ctx.hold_action == 4
    hold = ctx.commands.params[ctx.hold_action]
    assert hold.velocity == (0.0, 0.0)
    np.testing.assert_allclose(ctx.center_of([0.53, 0.47]), [0.55, 0.45, 0, 0])
    # the lattice continues beyond the grid
    np.testing.assert_allclose(ctx.center_of([-0.02, 5.01]), [-0.05, 5.05, 0, 0])
    assert ctx.grid.initial_index == ctx.grid.locate([0.5, 0.5])[0]
    assert ctx.params.eta > 0 and ctx.params.r > 0


def test_certificate_mode_rejects_moving_start():
    raw = small_raw(initial_state=[0.5, 0.5, 0.1, 0.0])
    build_context(parse_scenario(raw))
    raw["mode"] = {"certificate": True}
    with pytest.raises(PipelineError) as exc:
        build_context(parse_scenario(raw))
    assert exc.value.code == EXIT_SCENARIO


def test_overtightened_constraints_are_a_scenario_error():
    raw = small_raw()
    raw["constraints"]["deterministic"] = {"type": "box", "lo": [-0.01, -0.01], "hi": [0.01, 0.01]}
    with pytest.raises(PipelineError) as exc:
        build_context(parse_scenario(raw))
    assert exc.value.code == EXIT_SCENARIO and exc.value.stage == "tighten"


def test_theory_violations_fail_in_certificate_mode(small_scenario):
    ctx = build_context(small_scenario.with_overrides(certificate=True))

    class Fake:
        header = {"infeasible_samples": 2}

    with pytest.raises(TheoryViolation) as exc:
        check_theory(ctx, Fake(), None)
    assert exc.value.code == EXIT_THEORY
    # the same model is only reported outside certificate mode
    check_theory(build_context(small_scenario), Fake(), None)


def test_kernel_cache_is_shared_across_geometries(tmp_path):
    a = build_context(parse_scenario(small_raw()))
    b = build_context(parse_scenario(small_raw(geometry=NEAR_TARGET)))
    assert dynamics_digest(a.scenario) == dynamics_digest(b.scenario)
    m1 = estimate(a, tmp_path)
    assert a.timings.get("kernel_cache_hit") is None
    m2 = estimate(b, tmp_path)
    assert b.timings["kernel_cache_hit"] is True
    assert m1.mode == TRANSLATION
    np.testing.assert_array_equal(m1.samples.runs, m2.samples.runs)
    assert [p.name for p in tmp_path.iterdir()] == [kernel_cache_path(a, tmp_path).name]
    # a different seed is a different file
    c = build_context(parse_scenario(small_raw()).with_overrides(seed=1))
    assert kernel_cache_path(c, tmp_path) != kernel_cache_path(a, tmp_path)


def test_parallel_paths_match_serial(small_scenario):
    ctx = build_context(small_scenario)
    serial = estimate(ctx)
    par = estimate(build_context(small_scenario), threads=2)
    np.testing.assert_array_equal(serial.samples.runs, par.samples.runs)
    np.testing.assert_array_equal(serial.samples.nodes, par.samples.nodes)
    sol = solve(ctx, serial)
    r1 = evaluate_policy(ctx, sol.policy, 5)
    r2 = evaluate_policy(ctx, sol.policy, 5, threads=2)
    np.testing.assert_array_equal(r1.trajectories, r2.trajectories)
    np.testing.assert_array_equal(r1.success, r2.success)


def test_evaluation_records_fine_resolution_and_actions(small_scenario):
    ctx = build_context(small_scenario)
    sol = solve(ctx, estimate(ctx))
    rep = evaluate_policy(ctx, sol.policy, 3)
    N, J = small_scenario.time.N, small_scenario.time.J
    assert rep.trajectories.shape == (3, N * J + 1, 4)
    assert rep.inputs.shape == (3, N * J, 2)
    np.testing.assert_array_equal(rep.trajectories[:, 0], np.tile(small_scenario.x0, (3, 1)))
    assert np.all((rep.actions >= 0) & (rep.actions <= ctx.hold_action))
    assert rep.landing_failures.sum() == 0 and rep.g_violations.sum() == 0
    # a policy that always holds never commands motion
    still = Policy(np.full_like(sol.policy.actions, NO_OP))
    rep = evaluate_policy(ctx, still, 2)
    assert np.all(rep.actions == ctx.hold_action)


def test_lower_bound_and_value_ordering(tiny_run):
    _, out, man = tiny_run
    v = man["values"]
    assert 0 < v["V_tilde_0"] <= v["V_plain_0"] <= 1
    ev = man["evaluation"]
    assert ev["infeasible_runs"] == 0 and ev["g_violations"] == 0
    assert man["lower_bound_check"]["holds"]
    assert man["kernel"]["mode"] == TRANSLATION


def test_report_files(tiny_run):
    sc, out, man = tiny_run
    res = _rows(out / "results.csv")
    assert res[0] == RESULT_COLUMNS and len(res) == 2
    vf = _rows(out / "value_field.csv")
    assert len(vf) - 1 == man["grid"]["safe_cells"]
    par = _rows(out / "pareto.csv")
    assert par[0] == PARETO_COLUMNS and len(par) == 1 + len(sc.kappas)
    outcomes = _rows(out / "outcomes.csv")
    assert len(outcomes) == 1 + sc.trials
    trajs = sorted((out / "trajectories").iterdir())
    assert len(trajs) == sc.trials
    head = _rows(trajs[0])[0]
    assert head == ["t", "x0", "x1", "x2", "x3", "u0", "u1", "action"]
    geo = read_json(out / "geometry.json")
    assert {f["kind"] for f in geo["features"]} == {"obstacle", "target"}
    for name in ("value_field.png", "trajectories.png", "pareto.png"):
        assert (out / name).stat().st_size > 0
    assert (out / "events.jsonl").read_text() == ""
    V, pol, hdr = load_tables(out / "tables.npz")
    assert hdr["grid"] == man["grid"]["digest"] and hdr["model"] == man["kernel"]["rows_digest"]
    assert V.values[0, man["grid"]["initial_cell"]] == man["values"]["V_tilde_0"]
    assert "kernel" in read_json(out / "timings.json")
    assert "kernel" not in str(read_json(out / "manifest.json").get("timings", ""))


def test_figures_rerender_from_files(tiny_run, tmp_path):
    import shutil

    _, out, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    for p in copy.glob("*.png"):
        p.unlink()
    paths = render_figures(copy)
    assert {p.name for p in paths} == {"value_field.png", "trajectories.png", "pareto.png"}


def test_empty_evaluation_writes_headers_only(tmp_path):
    sc = parse_scenario(small_raw(geometry=NEAR_TARGET)).with_overrides(trials=0)
    man = run_pipeline(sc, tmp_path / "o", figures=False)
    assert "lower_bound_check" not in man
    assert _rows(tmp_path / "o" / "results.csv") == [RESULT_COLUMNS]
    assert len(_rows(tmp_path / "o" / "outcomes.csv")) == 1


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    sc, out, _ = tiny_run
    again = tmp_path / "again"
    run_pipeline(sc, again, cache_dir=tmp_path / "cache")
    cmp = filecmp.dircmp(out, again, ignore=["timings.json"])
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    sub = filecmp.dircmp(out / "trajectories", again / "trajectories")
    assert not sub.diff_files


def test_quadcopter_context_builds():
    ctx = build_context(load_scenario("quadcopter_labyrinth"))
    assert ctx.scenario.reconstructed
    assert ctx.discrete.n == 12
    assert ctx.params.r > 0 and ctx.grid.safe_indices.size > 0
    # planar positions are pure integrators here, so samples translate across cells
    assert ctx.scenario.system.positions_decoupled()
