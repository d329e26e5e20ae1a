import copy
import json

import numpy as np
import pytest

from reachavoid.geometry import HalfspacePolytope
from reachavoid.lti import StructuredLti
from reachavoid.scenario import load_scenario, parse_scenario


def double_integrator(u_max: float = 1.0) -> StructuredLti:
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    B = np.zeros((4, 2))
    B[2, 0] = B[3, 1] = 1.0
    E = np.zeros((4, 2))
    E[0, 0] = E[1, 1] = 1.0
    return StructuredLti(A, B, E, 2, HalfspacePolytope.from_box([-u_max] * 2, [u_max] * 2))


NEAR_TARGET = {"bounds": {"lo": [0, 0], "hi": [3, 3]},
               "obstacles": [{"type": "box", "lo": [1.2, 2.0], "hi": [1.5, 3.0]}],
               "targets": [{"type": "box", "lo": [1.4, 0.2], "hi": [2.4, 1.2]}]}


def small_raw(name="simple", **changes) -> dict:
    """A bundled scenario shrunk to test size (coarser time grid, few samples)."""
    raw = copy.deepcopy(load_scenario(name).raw)
    raw["time"] = {"T": 10, "N": 4, "J": 10, "sim_step": "0.05"}
    raw["kernel"] = {"samples": 8}
    raw["evaluation"] = {"trials": 6, "pareto_trials": 0}
    raw["commands"]["count"] = 4
    for k, v in changes.items():
        raw[k] = v
    return raw


@pytest.fixture
def small_scenario():
    return parse_scenario(small_raw())


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One full pipeline run on a shrunk scenario, shared across tests."""
    from reachavoid.pipeline import run_pipeline

    out = tmp_path_factory.mktemp("tiny_run")
    sc = parse_scenario(small_raw(geometry=NEAR_TARGET))
    manifest = run_pipeline(sc, out / "out", cache_dir=out / "cache")
    return sc, out / "out", manifest


def read_json(path):
    return json.loads(open(path).read())


def di_setup(J=25, delta_t="0.1", sim_step="0.01", noise_var=1.0, mode="robust", n_commands=20, seed=2024,
             zeta=0.1, tilde_equals_hat=True):
    """Double-integrator closed loop pieces: config, cache, stepper, noise, commands, runner."""
    from fractions import Fraction

    from reachavoid.lti import STREAM_COMMANDS, FineStepper, NoiseModel, TimeGrid, derive_rng, discretize
    from reachavoid.mpc import BlockRunner, CommandParams, CommandSet, MpcConfig, MpcProblemCache
    from reachavoid.tightening import build_constraint_family, tightening_params

    sys = double_integrator()
    dt = Fraction(delta_t)
    grid = TimeGrid(dt * J * 4, 4, J, sim_step)
    g = HalfspacePolytope.from_box([-1, -1], [1, 1])
    params = tightening_params(sys, g, grid.delta_t, grid.Delta_t, zeta)
    fam = build_constraint_family(g, params, tilde_equals_hat=tilde_equals_hat)
    cfg = MpcConfig(discretize(sys, grid.delta_t), np.eye(4), np.eye(2), J, fam, sys.input_set, mode)
    cache = MpcProblemCache(cfg)
    stepper = FineStepper(sys, grid.delta_t, float(grid.sim_step))
    noise = NoiseModel(np.zeros(2), noise_var * np.eye(2), float(grid.sim_step))
    rng = derive_rng(seed, STREAM_COMMANDS)
    params_list = [CommandParams(tuple(rng.normal(0, 0.3, 2)), tuple(rng.uniform(0.5, 2.0, 2)))
                   for _ in range(n_commands)]
    commands = CommandSet(params_list, grid)
    runner = BlockRunner(cfg, stepper, noise, commands, zeta, cache)
    return {"sys": sys, "grid": grid, "g": g, "params": params, "family": fam, "cfg": cfg, "cache": cache,
            "stepper": stepper, "noise": noise, "commands": commands, "runner": runner, "zeta": zeta}


ACCEPTANCE: dict = {}


def report_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
