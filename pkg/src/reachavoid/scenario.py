"""Scenario files: one JSON document describing system, geometry and experiment."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import (
    Complement,
    GeometryError,
    HalfspacePolytope,
    HyperRect,
    Intersection,
    Union,
    contains_points,
    polytope_from_dict,
    region_from_dict,
)
from .lti import STREAM_COMMANDS, ModelError, NoiseModel, StructuredLti, TimeGrid, derive_rng
from .mpc import CommandParams

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    pass


def bundled_scenarios() -> list[str]:
    root = resources.files("reachavoid") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    cand = resources.files("reachavoid") / "scenarios" / f"{name_or_path}.json"
    if cand.is_file():
        return Path(str(cand))
    raise ScenarioError(f"no scenario file or bundled scenario named {name_or_path!r}")


def _get(d: dict, key: str, where: str):
    if key not in d:
        raise ScenarioError(f"missing field {where}.{key}")
    return d[key]


def _array(x, where, ndim=None):
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: not a numeric array") from exc
    if ndim is not None and arr.ndim != ndim:
        raise ScenarioError(f"{where}: expected a {ndim}-d array")
    if not np.all(np.isfinite(arr)):
        raise ScenarioError(f"{where}: non-finite entries")
    return arr


def _weight(spec, n, where):
    if isinstance(spec, dict) and "diag" in spec:
        d = _array(spec["diag"], where, 1)
        if d.size != n:
            raise ScenarioError(f"{where}: diagonal has length {d.size}, expected {n}")
        return np.diag(d)
    M = _array(spec, where, 2)
    if M.shape != (n, n):
        raise ScenarioError(f"{where}: expected {n}x{n}")
    return M


def _draw(rng, spec, where):
    if "normal" in spec:
        p = spec["normal"]
        return rng.normal(float(p.get("mean", 0.0)), float(p["std"]))
    if "uniform" in spec:
        p = spec["uniform"]
        return rng.uniform(float(p["lo"]), float(p["hi"]))
    raise ScenarioError(f"{where}: distribution must be 'normal' or 'uniform'")


@dataclass(frozen=True)
class RadialCost:
    """Stage cost ``-||p - center|| / scale``; zero outside the safe set and inside the target."""

    center: tuple
    scale: float

    def __call__(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        return -np.linalg.norm(P - np.asarray(self.center), axis=-1) / self.scale

    def masked(self, P, safe_set, target_set) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        g = self(P)
        live = contains_points(safe_set, P)
        if target_set is not None:
            live &= ~contains_points(target_set, P)
        return np.where(live, g, 0.0)


@dataclass(eq=False)
class Scenario:
    raw: dict
    name: str
    system: StructuredLti
    time: TimeGrid
    noise: NoiseModel
    g_d: HalfspacePolytope
    kappa_x: float | None
    bounds: HyperRect
    obstacles: list
    targets: list
    x0: np.ndarray
    cell_edge: float
    Q: np.ndarray
    R: np.ndarray
    terminal: str
    tilde_equals_hat: bool
    samples: int
    trials: int
    pareto_trials: int
    seed: int
    certificate: bool
    kappas: list
    cost: RadialCost | None
    alpha: float
    position_indices: tuple
    velocity_indices: tuple
    reconstructed: bool

    @property
    def safe_set(self):
        if not self.obstacles:
            return self.bounds
        return Intersection((self.bounds, Complement(Union(tuple(self.obstacles)), self.bounds.dim)))

    @property
    def target_set(self):
        if not self.targets:
            return None
        return self.targets[0] if len(self.targets) == 1 else Union(tuple(self.targets))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def command_params(self, seed: int | None = None) -> list[CommandParams]:
        """The frozen action set, sampled once from the declared distributions."""
        spec = self.raw["commands"]
        if "explicit" in spec:
            out = []
            for row in spec["explicit"]:
                if len(row) != 4:
                    raise ScenarioError("explicit commands are [vx, vy, qx, qy]")
                out.append(CommandParams((float(row[0]), float(row[1])), (float(row[2]), float(row[3]))))
            return out
        rng = derive_rng(self.seed if seed is None else seed, STREAM_COMMANDS)
        out = []
        for _ in range(int(spec["count"])):
            vx = _draw(rng, spec["velocity"], "commands.velocity")
            vy = _draw(rng, spec["velocity"], "commands.velocity")
            qx = _draw(rng, spec["q"], "commands.q")
            qy = _draw(rng, spec["q"], "commands.q")
            out.append(CommandParams((vx, vy), (qx, qy)))
        return out

    def with_overrides(self, **changes) -> "Scenario":
        """Copy with top-level experiment settings replaced (``seed``, ``trials``, ...)."""
        raw = copy.deepcopy(self.raw)
        if "seed" in changes:
            raw.setdefault("seeds", {})["root"] = int(changes.pop("seed"))
        if "trials" in changes:
            raw.setdefault("evaluation", {})["trials"] = int(changes.pop("trials"))
        if "pareto_trials" in changes:
            raw.setdefault("evaluation", {})["pareto_trials"] = int(changes.pop("pareto_trials"))
        if "samples" in changes:
            raw.setdefault("kernel", {})["samples"] = int(changes.pop("samples"))
        if "certificate" in changes:
            raw.setdefault("mode", {})["certificate"] = bool(changes.pop("certificate"))
        if changes:
            raise ScenarioError(f"unknown overrides {sorted(changes)}")
        return parse_scenario(raw)


def load_scenario(name_or_path) -> Scenario:
    path = resolve_path(name_or_path)
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return parse_scenario(raw)


def parse_scenario(raw: dict) -> Scenario:
    try:
        return _parse(raw)
    except (GeometryError, ModelError) as exc:
        raise ScenarioError(str(exc)) from exc
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc


def _parse(raw: dict) -> Scenario:
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version must be {SCHEMA_VERSION}")
    name = str(_get(raw, "name", "scenario"))
    s = _get(raw, "system", "scenario")
    A = _array(_get(s, "A_c", "system"), "system.A_c", 2)
    n = A.shape[0]
    u_set = polytope_from_dict(_get(s, "input_set", "system"))
    system = StructuredLti(A, _array(s["B_c"], "system.B_c", 2), _array(s["E_c"], "system.E_c", 2),
                           int(s["n_s"]), u_set)
    t = _get(raw, "time", "scenario")
    time = TimeGrid(str(t["T"]), int(t["N"]), int(t["J"]), str(t["sim_step"]))
    nz = _get(raw, "noise", "scenario")
    cov = nz["covariance"]
    cov = np.diag(cov["diag"]) if isinstance(cov, dict) else _array(cov, "noise.covariance", 2)
    noise = NoiseModel(_array(nz.get("mean", np.zeros(system.n_w)), "noise.mean", 1), cov, float(time.sim_step))
    if noise.n_w != system.n_w:
        raise ScenarioError("noise dimension does not match E_c")
    c = _get(raw, "constraints", "scenario")
    g_d = polytope_from_dict(_get(c, "deterministic", "constraints"))
    if g_d.dim != system.n_d:
        raise ScenarioError("deterministic constraint set has the wrong dimension")
    kx = c.get("kappa_x")
    geo = _get(raw, "geometry", "scenario")
    b = _get(geo, "bounds", "geometry")
    bounds = HyperRect.from_bounds(_array(b["lo"], "geometry.bounds.lo", 1), _array(b["hi"], "geometry.bounds.hi", 1))
    if bounds.dim != system.n_s:
        raise ScenarioError("geometry lives on the stochastic states; dimension mismatch")
    obstacles = [region_from_dict(o) for o in geo.get("obstacles", [])]
    targets = [region_from_dict(o) for o in geo.get("targets", [])]
    x0 = _array(_get(raw, "initial_state", "scenario"), "initial_state", 1)
    if x0.size != n:
        raise ScenarioError("initial_state has the wrong length")
    cell_edge = float(_get(_get(raw, "grid", "scenario"), "cell_edge", "grid"))
    if not cell_edge > 0:
        raise ScenarioError("grid.cell_edge must be positive")
    m = _get(raw, "mpc", "scenario")
    Q = _weight(_get(m, "Q", "mpc"), n, "mpc.Q")
    R = _weight(_get(m, "R", "mpc"), system.m, "mpc.R")
    terminal = m.get("terminal", "zero")
    if terminal != "zero":
        raise ScenarioError("only the zero terminal set is supported by the pipeline")
    cmds = _get(raw, "commands", "scenario")
    if "explicit" not in cmds:
        for key in ("count", "velocity", "q"):
            _get(cmds, key, "commands")
        if int(cmds["count"]) < 1:
            raise ScenarioError("commands.count must be positive")
    idx = raw.get("command_indices", {})
    pos = tuple(int(i) for i in idx.get("position", (0, 1)))
    vel = tuple(int(i) for i in idx.get("velocity", (system.n_s, system.n_s + 1)))
    ev = raw.get("evaluation", {})
    mode = raw.get("mode", {})
    con = raw.get("constrained", {})
    cost = None
    if "cost" in con:
        cs = con["cost"]
        if cs.get("type") != "radial":
            raise ScenarioError("constrained.cost.type must be 'radial'")
        cost = RadialCost(tuple(float(v) for v in cs["center"]), float(cs.get("scale", 1.0)))
    seed = int(raw.get("seeds", {}).get("root", 0))
    if not 0 <= seed < 2**64:
        raise ScenarioError("seed must be an unsigned 64-bit integer")
    sc = Scenario(
        raw=raw, name=name, system=system, time=time, noise=noise, g_d=g_d,
        kappa_x=None if kx is None else float(kx), bounds=bounds, obstacles=obstacles, targets=targets,
        x0=x0, cell_edge=cell_edge, Q=Q, R=R, terminal=terminal,
        tilde_equals_hat=bool(m.get("tilde_equals_hat", True)),
        samples=int(raw.get("kernel", {}).get("samples", 50)),
        trials=int(ev.get("trials", 500)), pareto_trials=int(ev.get("pareto_trials", 0)),
        seed=seed, certificate=bool(mode.get("certificate", False)),
        kappas=[float(k) for k in con.get("kappas", [])], cost=cost, alpha=float(con.get("alpha", 0.0)),
        position_indices=pos, velocity_indices=vel, reconstructed=bool(raw.get("reconstructed", False)),
    )
    if sc.samples < 1 or sc.trials < 0:
        raise ScenarioError("kernel.samples must be positive and evaluation.trials nonnegative")
    if not contains_points(sc.safe_set, x0[None, : system.n_s])[0]:
        raise ScenarioError("initial position lies outside the safe set")
    if any(k < 0 or math.isnan(k) for k in sc.kappas):
        raise ScenarioError("kappas must be nonnegative")
    return sc
