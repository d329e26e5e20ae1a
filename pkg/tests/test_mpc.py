import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachavoid import mpc as mpc_mod
from reachavoid.lti import derive_rng
from reachavoid.mpc import (
    NOMINAL,
    CommandParams,
    MpcConfig,
    MpcController,
    MpcError,
    MpcInfeasibleError,
    MpcProblemCache,
    RmpcAnchor,
    build_mpc_qp,
    reference_from_command,
)
from reachavoid.qp import solve_qp

from .conftest import di_setup
from .mpcchecks import closed_loop_run, input_deviation


def _cvxpy_inputs(cfg, z0, ref, Q, h):
    """Independent transcription with explicit states (terminal x^d = 0)."""
    import cvxpy as cp

    sys = cfg.system
    n, m, ns = sys.n, sys.m, sys.n_s
    G = cfg.state_set
    U = cfg.input_set
    z = cp.Variable((h + 1, n))
    v = cp.Variable((h, m))
    cost = 0
    cons = [z[0] == z0]
    for l in range(h):
        cons += [z[l + 1] == sys.A @ z[l] + sys.B @ v[l], U.normals @ v[l] <= U.offsets]
        cost += cp.quad_form(z[l + 1] - ref[l + 1], Q) + cp.quad_form(v[l], cfg.R)
    for l in range(1, h):
        cons += [G.normals @ z[l, ns:] <= G.offsets]
    cons += [z[h, ns:] == 0]
    cp.Problem(cp.Minimize(cost), cons).solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12,
                                              tol_feas=1e-12)
    return v.value


@pytest.mark.parametrize("j", [0, 7, 24])
def test_transcription_matches_independent_model(j):
    s = di_setup(J=25)
    cfg = s["cfg"]
    rng = np.random.default_rng(j)
    x0 = np.array([0.33, -0.21, 0.0, 0.0])
    center = np.array([0.35, -0.25, 0.0, 0.0])
    cmd = s["commands"].command(3, center)
    anchor = RmpcAnchor.build(cfg.system, center, x0, 0.1, cfg.horizon)
    # a state reachable at step j: drift the anchor offset plus a small velocity
    h = cfg.horizon - j
    # keep the velocity small enough to be zeroed in the remaining steps
    x = anchor.offsets[j] + center
    x[2:] = rng.uniform(-1, 1, 2) * min(0.3, 0.05 * h) if j else 0.0
    p = build_mpc_qp(cfg, j, x, cmd, anchor)
    sol = solve_qp(p)
    Q = mpc_mod._effective_Q(cfg.Q, cmd.q_override)
    z0 = x - anchor.offsets[j]
    V = _cvxpy_inputs(cfg, z0, cmd.reference[j:], Q, h)
    np.testing.assert_allclose(sol.z[: h * 2].reshape(h, 2), V, atol=1e-6)


def test_condensed_and_sparse_forms_agree(monkeypatch):
    s = di_setup(J=10)
    cfg = s["cfg"]
    center = np.array([1.05, 2.05, 0, 0])
    x0 = center + np.array([0.02, -0.04, 0, 0])
    cmd = s["commands"].command(1, center)
    anchor = RmpcAnchor.build(cfg.system, center, x0, 0.1, cfg.horizon)
    a = solve_qp(build_mpc_qp(cfg, 0, x0, cmd, anchor, MpcProblemCache(cfg)))
    monkeypatch.setattr(mpc_mod, "CONDENSE_LIMIT", 0)
    b = solve_qp(build_mpc_qp(cfg, 0, x0, cmd, anchor, MpcProblemCache(cfg)))
    nz = cfg.horizon * 4
    np.testing.assert_allclose(a.z, b.z[nz:], atol=1e-8)


def test_reference_is_constant_velocity_ramp():
    s = di_setup(J=5)
    cmd = reference_from_command(CommandParams((0.2, -0.1), (1.5, 0.7)), np.array([1.0, 2.0, 0, 0]), s["grid"])
    t = np.arange(6) * 0.1
    np.testing.assert_allclose(cmd.reference[:, 0], 1.0 + 0.2 * t)
    np.testing.assert_allclose(cmd.reference[:, 1], 2.0 - 0.1 * t)
    np.testing.assert_allclose(cmd.reference[:, 2], 0.2)
    assert cmd.q_override == ((0, 1.5), (1, 0.7))


def test_block_lands_on_terminal_set_and_respects_tightening():
    s = di_setup(J=25, noise_var=0.0)
    res = s["runner"].run(np.array([0.05, 0.05, 0, 0]), 0, derive_rng(0, 9), center=np.array([0.05, 0.05, 0, 0]))
    assert not res.infeasible
    assert np.max(np.abs(res.states[-1, 2:])) <= 1e-6
    S = s["stepper"].substeps
    nodes = res.states[::S, 2:]
    G = s["family"].g_tilde
    assert G.contains_points(nodes[1:-1] - 1e-9 * np.sign(nodes[1:-1])).all()
    U = s["cfg"].input_set
    assert U.contains_points(res.inputs - 1e-9 * np.sign(res.inputs)).all()


def test_controller_matches_cold_solves():
    s = di_setup(J=25)
    cfg = s["cfg"]
    ctrl = MpcController(cfg, s["cache"], 0.1)
    c = np.array([0.45, 0.25, 0, 0])
    x = c + np.array([0.03, -0.02, 0, 0])
    cmd = s["commands"].command(5, c)
    ctrl.begin_block(0, x, cmd, c)
    rng = derive_rng(1, 9)
    for j in range(cfg.horizon):
        u = ctrl.step(j, x)
        cold = solve_qp(build_mpc_qp(cfg, j, x, cmd, ctrl.anchor))
        np.testing.assert_allclose(u, cold.z[:2], atol=1e-7)
        x = s["stepper"].advance(x, u, s["noise"].sample(rng, s["stepper"].substeps))[-1]


def test_anchor_rejects_states_outside_cell():
    s = di_setup(J=5)
    sys = s["cfg"].system
    with pytest.raises(MpcError):
        RmpcAnchor.build(sys, np.zeros(4), np.array([0.2, 0, 0, 0]), 0.1, 5)
    with pytest.raises(MpcError):
        RmpcAnchor.build(sys, np.zeros(4), np.array([0.0, 0, 0.1, 0]), 0.1, 5)


def test_inner_steps_must_be_in_order():
    s = di_setup(J=5)
    ctrl = MpcController(s["cfg"], s["cache"], 0.1)
    c = np.zeros(4)
    ctrl.begin_block(0, c, s["commands"].command(0, c), c)
    with pytest.raises(MpcError):
        ctrl.step(1, c)


def test_infeasible_problem_raises_with_context():
    s = di_setup(J=5, mode=NOMINAL)
    cfg = s["cfg"]
    ctrl = MpcController(cfg, s["cache"])
    x = np.array([0.0, 0.0, 0.9, 0.9])
    ctrl.begin_block(0, x, s["commands"].command(0, x))
    # the velocity cannot be brought to zero within the horizon
    with pytest.raises(MpcInfeasibleError) as exc:
        ctrl.step(0, x)
    assert exc.value.k == 0 and exc.value.j == 0


def test_config_validation():
    s = di_setup(J=5)
    cfg = s["cfg"]
    with pytest.raises(MpcError):
        MpcConfig(cfg.system, -np.eye(4), np.eye(2), 5, cfg.family, cfg.input_set)
    with pytest.raises(MpcError):
        MpcConfig(cfg.system, np.eye(4), np.zeros((2, 2)), 5, cfg.family, cfg.input_set)
    with pytest.raises(MpcError):
        MpcConfig(cfg.system, np.eye(4), np.eye(2), 0, cfg.family, cfg.input_set)


@settings(max_examples=10, deadline=None)
@given(st.integers(-40, 39), st.integers(-40, 39), st.integers(0, 2**32 - 1), st.integers(0, 19))
def test_inputs_do_not_depend_on_position_in_cell(ix, iy, seed, action):
    s = di_setup(J=25)
    cell = (np.array([ix, iy]) + 0.5) * 0.1
    assert input_deviation(s, cell, seed, action) <= 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_noisy_closed_loop_stays_feasible(seed):
    s = di_setup(J=25)
    infeasible, violations, solves = closed_loop_run(s, seed)
    assert (infeasible, violations) == (0, 0)
    assert solves == 500
