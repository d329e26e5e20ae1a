"""Reference-tracking MPC and its cell-anchored robust variant.

Within one outer step the controller solves, at every inner step ``j``,

    min  sum_{l=j}^{J} ||z_l - ref_l||_Q^2 + sum_{l=j}^{J-1} ||v_l||_R^2
    s.t. z_{l+1} = A z_l + B v_l,   v_l in U,
         z_l^d in G (tightened) for j < l < J,   z_J in terminal set,

with ``z_j = x_j`` (nominal) or ``z_j = x_j - A^j (x_0 - c)`` (robust, anchored
at the centre ``c`` of the cell holding ``x_0``). The anchored form makes the
input sequence independent of where ``x_0`` sits inside the cell.

Problems are condensed (states eliminated) unless ``horizon * n`` is large.
QP data for a given remaining horizon and weight override is built once and
reused across solves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import HalfspacePolytope
from .lti import DiscreteLti, TimeGrid
from .qp import MAX_ITER, OPTIMAL, QpSolver, QuadraticProgram
from .tightening import ConstraintFamily, ZeroSet

log = logging.getLogger(__name__)

NOMINAL = "nominal"
ROBUST = "robust"
CONDENSE_LIMIT = 2000
INEXACT_ACCEPT = 1e-5
ANCHOR_D_TOL = 1e-6


class MpcError(RuntimeError):
    pass


class MpcInfeasibleError(MpcError):
    def __init__(self, k, j, x, status, primal_residual, dual_residual):
        self.k, self.j = k, j
        self.x = np.array(x, dtype=float)
        self.status = status
        self.residuals = (primal_residual, dual_residual)
        super().__init__(f"MPC problem not solved at outer step {k}, inner step {j}: {status} "
                         f"(primal {primal_residual:.3g}, dual {dual_residual:.3g})")


@dataclass(eq=False)
class MpcConfig:
    system: DiscreteLti
    Q: np.ndarray
    R: np.ndarray
    horizon: int
    family: ConstraintFamily
    input_set: HalfspacePolytope
    mode: str = ROBUST
    tol: float = 1e-8
    max_iter: int = 20_000
    slack_weight: float | None = None

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        self.Q = _sym(self.Q, n, "Q")
        self.R = _sym(self.R, m, "R")
        if np.linalg.eigvalsh(self.Q).min() < -1e-10:
            raise MpcError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 1e-10:
            raise MpcError("R must be positive definite")
        if self.horizon < 1:
            raise MpcError("horizon must be at least 1")
        if self.mode not in (NOMINAL, ROBUST):
            raise MpcError(f"unknown mode {self.mode!r}")
        if self.family.g.dim != n - self.system.n_s:
            raise MpcError("constraint family must live on the deterministic states")
        if self.input_set.dim != m:
            raise MpcError("input set dimension mismatch")
        if self.slack_weight is not None and self.slack_weight <= 0:
            raise MpcError("slack weight must be positive")

    @property
    def state_set(self) -> HalfspacePolytope:
        return self.family.g_tilde if self.mode == ROBUST else self.family.g_hat

    def terminal_polytope(self) -> HalfspacePolytope | None:
        if isinstance(self.family.terminal, ZeroSet):
            return None
        if self.mode == ROBUST:
            return self.family.robust_terminal()
        return self.family.terminal.polytope


def _sym(M, k, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (k, k):
        raise MpcError(f"{name} must be {k}x{k}")
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class Command:
    """A reference trajectory ``ref_0..ref_J`` plus diagonal overrides of ``Q``."""

    reference: np.ndarray
    q_override: tuple = ()

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=float)
        if ref.ndim != 2:
            raise MpcError("reference must be a (J+1, n) array")
        ref.setflags(write=False)
        object.__setattr__(self, "reference", ref)
        ov = tuple((int(i), float(v)) for i, v in self.q_override)
        if any(v < 0 for _, v in ov):
            raise MpcError("weight overrides must be nonnegative")
        object.__setattr__(self, "q_override", ov)


@dataclass(frozen=True)
class CommandParams:
    """Constant planar velocity reference and position weights."""

    velocity: tuple
    q_weights: tuple

    def to_list(self) -> list:
        return [float(v) for v in self.velocity] + [float(q) for q in self.q_weights]


def reference_from_command(params: CommandParams, x_k, grid: TimeGrid, position_indices=(0, 1),
                           velocity_indices=(2, 3)) -> Command:
    """Integrate a constant velocity from the position of ``x_k``.

    All other reference entries (other velocities, attitudes, rates) are zero.
    """
    x_k = np.asarray(x_k, dtype=float)
    J = grid.J
    steps = np.arange(J + 1) * grid.delta_t
    ref = np.zeros((J + 1, x_k.size))
    for p, v in zip(position_indices, params.velocity):
        ref[:, p] = x_k[p] + v * steps
    for vi, v in zip(velocity_indices, params.velocity):
        ref[:, vi] = v
    override = tuple(zip(position_indices, params.q_weights))
    return Command(ref, override)


@dataclass
class RmpcAnchor:
    cell_center: np.ndarray
    initial_state: np.ndarray
    offsets: np.ndarray

    @classmethod
    def build(cls, system: DiscreteLti, center, x0, zeta: float, horizon: int) -> "RmpcAnchor":
        c = np.asarray(center, dtype=float)
        x0 = np.asarray(x0, dtype=float)
        ns = system.n_s
        if np.max(np.abs(x0[:ns] - c[:ns]), initial=0.0) > 0.5 * zeta + 1e-12:
            raise MpcError("initial state lies outside the anchoring cell")
        if np.max(np.abs(x0[ns:] - c[ns:]), initial=0.0) > ANCHOR_D_TOL:
            raise MpcError("deterministic states differ from the cell centre")
        offs = np.empty((horizon + 1, x0.size))
        e = x0 - c
        for j in range(horizon + 1):
            offs[j] = e
            e = system.A @ e
        return cls(c, x0, offs)


class _Template:
    """QP data for one remaining horizon and one weight matrix.

    ``q = Mz z + Mr ref``, ``b_eq = Ez z``, ``b_in = I0 - Iz z`` with ``z``
    the initial predicted state and ``ref`` the stacked references.
    """

    def __init__(self, cfg: MpcConfig, Q: np.ndarray, h: int, powers, condensed: bool):
        sys = cfg.system
        n, m, ns = sys.n, sys.m, sys.n_s
        A, B = sys.A, sys.B
        G = cfg.state_set
        U = cfg.input_set
        term = cfg.terminal_polytope()
        Sd = np.eye(n)[ns:]
        Hg = G.normals @ Sd
        n_state_blocks = h - 1 if term is None else h
        self.h, self.m = h, m
        self.layout = (n_state_blocks, G.n_constraints, h, U.n_constraints)

        Qbar = np.kron(np.eye(h), Q)
        Rbar = np.kron(np.eye(h), cfg.R)
        if condensed:
            Phi = np.vstack([powers[r + 1] for r in range(h)])
            Gam = np.zeros((h * n, h * m))
            for r in range(h):
                for c in range(r + 1):
                    Gam[r * n:(r + 1) * n, c * m:(c + 1) * m] = powers[r - c] @ B
            nv = h * m
            P = Gam.T @ Qbar @ Gam + Rbar
            Mz = Gam.T @ Qbar @ Phi
            Mr = -Gam.T @ Qbar
            S_state = [(Gam[r * n:(r + 1) * n], Phi[r * n:(r + 1) * n]) for r in range(h)]
            Vsel = np.eye(nv)
            v_first = 0
            A_eq_dyn = np.zeros((0, nv))
            E_dyn = np.zeros((0, n))
        else:
            nz = h * n
            nv = nz + h * m
            P = np.zeros((nv, nv))
            P[:nz, :nz] = Qbar
            P[nz:, nz:] = Rbar
            Mz = np.zeros((nv, n))
            Mr = np.zeros((nv, h * n))
            Mr[:nz] = -Qbar
            sel = np.eye(nv)
            S_state = [(sel[r * n:(r + 1) * n], np.zeros((n, n))) for r in range(h)]
            Vsel = sel[nz:]
            v_first = nz
            A_eq_dyn = np.zeros((nz, nv))
            E_dyn = np.zeros((nz, n))
            for r in range(h):
                A_eq_dyn[r * n:(r + 1) * n, r * n:(r + 1) * n] = np.eye(n)
                A_eq_dyn[r * n:(r + 1) * n, nz + r * m:nz + (r + 1) * m] = -B
                if r == 0:
                    E_dyn[:n] = A
                else:
                    A_eq_dyn[r * n:(r + 1) * n, (r - 1) * n:r * n] = -A

        rows_in, I0, Iz = [], [], []
        for r in range(n_state_blocks):
            Gr, Fr = S_state[r]
            rows_in.append(Hg @ Gr)
            I0.append(G.offsets)
            Iz.append(Hg @ Fr)
        n_soft = sum(x.shape[0] for x in rows_in)
        for r in range(h):
            rows_in.append(U.normals @ Vsel[r * m:(r + 1) * m])
            I0.append(U.offsets)
            Iz.append(np.zeros((U.n_constraints, n)))
        GJ, FJ = S_state[h - 1]
        if term is not None:
            Ht = term.normals @ Sd
            rows_in.append(Ht @ GJ)
            I0.append(term.offsets)
            Iz.append(Ht @ FJ)
            A_eq_term = np.zeros((0, nv))
            E_term = np.zeros((0, n))
        else:
            A_eq_term = Sd @ GJ
            E_term = -Sd @ FJ
        A_in = np.vstack(rows_in)
        self.I0 = np.concatenate(I0)
        self.Iz = np.vstack(Iz)
        A_eq = np.vstack([A_eq_dyn, A_eq_term])
        self.Ez = np.vstack([E_dyn, E_term])
        if cfg.slack_weight is not None:
            ns_ = n_soft
            w = cfg.slack_weight
            P = np.block([[P, np.zeros((nv, ns_))], [np.zeros((ns_, nv)), w * np.eye(ns_)]])
            Mz = np.vstack([Mz, np.zeros((ns_, n))])
            Mr = np.vstack([Mr, np.zeros((ns_, Mr.shape[1]))])
            A_in = np.hstack([A_in, np.zeros((A_in.shape[0], ns_))])
            A_in[:ns_, nv:] = -np.eye(ns_)
            A_in = np.vstack([A_in, np.hstack([np.zeros((ns_, nv)), -np.eye(ns_)])])
            self.I0 = np.concatenate([self.I0, np.zeros(ns_)])
            self.Iz = np.vstack([self.Iz, np.zeros((ns_, n))])
            A_eq = np.hstack([A_eq, np.zeros((A_eq.shape[0], ns_))])
            self.q0 = np.concatenate([np.zeros(nv), np.full(ns_, w)])
        else:
            self.q0 = np.zeros(P.shape[0])
        self.P, self.A_eq, self.A_in = P, A_eq, A_in
        self.Mz, self.Mr = Mz, Mr
        self.v_first = v_first
        self.n_vars = P.shape[0]
        self.n_in = A_in.shape[0]
        self.solver = QpSolver(P, A_eq if A_eq.shape[0] else None, A_in)

    def data(self, z, ref_stack):
        q = self.q0 + self.Mz @ z + self.Mr @ ref_stack
        b_eq = self.Ez @ z
        b_in = self.I0 - self.Iz @ z
        return q, b_eq, b_in

    def program(self, z, ref_stack) -> QuadraticProgram:
        q, b_eq, b_in = self.data(z, ref_stack)
        return QuadraticProgram(self.P, q, self.A_eq if self.A_eq.shape[0] else None,
                                b_eq if self.A_eq.shape[0] else None, self.A_in, b_in)

    def shifted_active(self, active: np.ndarray) -> np.ndarray:
        """Map active inequality rows of the ``h + 1`` problem onto this one."""
        nsb, ng, nub, nu = self.layout
        prev_state = (nsb + 1) * ng
        prev_input = (nub + 1) * nu
        out = []
        for i in active:
            if i < prev_state:
                if i >= ng:
                    out.append(i - ng)
            elif i < prev_state + prev_input:
                k = i - prev_state
                if k >= nu:
                    out.append(nsb * ng + k - nu)
            else:
                out.append(i - ng - nu)
        return np.asarray(out, dtype=int)


def _effective_Q(Q, override):
    if not override:
        return Q
    Q = Q.copy()
    for i, v in override:
        Q[i, i] = v
    if np.linalg.eigvalsh(Q).min() < -1e-10:
        raise MpcError("weight override makes Q indefinite")
    return Q


class MpcProblemCache:
    """Shared, read-mostly cache of QP templates for one configuration."""

    def __init__(self, cfg: MpcConfig):
        self.cfg = cfg
        A = cfg.system.A
        self.powers = [np.eye(A.shape[0])]
        for _ in range(cfg.horizon):
            self.powers.append(A @ self.powers[-1])
        self._templates: dict = {}

    def template(self, h: int, override: tuple) -> _Template:
        key = (h, override)
        t = self._templates.get(key)
        if t is None:
            Q = _effective_Q(self.cfg.Q, override)
            condensed = h * self.cfg.system.n <= CONDENSE_LIMIT
            t = _Template(self.cfg, Q, h, self.powers, condensed)
            self._templates[key] = t
        return t


def build_mpc_qp(cfg: MpcConfig, j: int, x, cmd: Command, anchor: RmpcAnchor | None = None,
                 cache: MpcProblemCache | None = None) -> QuadraticProgram:
    """Transcribe the inner-step problem at step ``j`` into a QP over ``(z, v)`` or ``v``."""
    if not 0 <= j < cfg.horizon:
        raise MpcError("inner step out of range")
    if cfg.mode == ROBUST and anchor is None:
        raise MpcError("robust mode needs an anchor")
    cache = cache or MpcProblemCache(cfg)
    z = _initial(cfg, j, x, anchor)
    t = cache.template(cfg.horizon - j, cmd.q_override)
    return t.program(z, cmd.reference[j + 1:].reshape(-1))


def _initial(cfg, j, x, anchor):
    x = np.asarray(x, dtype=float)
    if cfg.mode == ROBUST:
        return x - anchor.offsets[j]
    return x


@dataclass
class SolveRecord:
    k: int
    j: int
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float


class MpcController:
    """Receding-horizon controller; one instance per simulated trajectory."""

    def __init__(self, cfg: MpcConfig, cache: MpcProblemCache | None = None, zeta: float | None = None,
                 record: bool = False):
        self.cfg = cfg
        self.cache = cache or MpcProblemCache(cfg)
        self.zeta = zeta
        self.record = record
        self.events: list[SolveRecord] = []
        self.k = 0
        self.command: Command | None = None
        self.anchor: RmpcAnchor | None = None
        self._prev = None
        self._prev_active = None
        self._next_j = 0

    def begin_block(self, k: int, x0, command: Command, center=None) -> None:
        """Start outer step ``k`` from ``x0`` under ``command``."""
        cfg = self.cfg
        if command.reference.shape != (cfg.horizon + 1, cfg.system.n):
            raise MpcError("reference has the wrong shape")
        self.k = k
        self.command = command
        if cfg.mode == ROBUST:
            if center is None or self.zeta is None:
                raise MpcError("robust mode needs a cell centre and cell edge")
            self.anchor = RmpcAnchor.build(cfg.system, center, x0, self.zeta, cfg.horizon)
        else:
            self.anchor = None
        self._prev = None
        self._prev_active = None
        self._next_j = 0

    def step(self, j: int, x) -> np.ndarray:
        cfg = self.cfg
        if self.command is None:
            raise MpcError("begin_block must be called first")
        if j != self._next_j:
            raise MpcError(f"inner steps must be taken in order (expected {self._next_j}, got {j})")
        z = _initial(cfg, j, x, self.anchor)
        tmpl = self.cache.template(cfg.horizon - j, self.command.q_override)
        q, b_eq, b_in = tmpl.data(z, self.command.reference[j + 1:].reshape(-1))
        warm = guess = None
        if self._prev is not None:
            guess = tmpl.shifted_active(self._prev_active)
            if tmpl.v_first == 0 and cfg.slack_weight is None:
                warm = np.concatenate([self._prev[self.cfg.system.m:]])
        sol = tmpl.solver.solve(q, b_eq if b_eq.size else None, b_in, tol=cfg.tol, max_iter=cfg.max_iter,
                                warm_start=warm, active_guess=guess)
        if self.record:
            self.events.append(SolveRecord(self.k, j, sol.status, sol.iterations,
                                           sol.primal_residual, sol.dual_residual))
        if sol.status != OPTIMAL:
            usable = (sol.status == MAX_ITER and sol.primal_residual <= INEXACT_ACCEPT
                      and sol.dual_residual <= INEXACT_ACCEPT)
            if not usable:
                raise MpcInfeasibleError(self.k, j, x, sol.status, sol.primal_residual, sol.dual_residual)
            log.warning("accepting inexact MPC solution at (%d, %d): residuals %.2g / %.2g",
                        self.k, j, sol.primal_residual, sol.dual_residual)
        self._prev = sol.z
        self._prev_active = sol.active_set()
        self._next_j = j + 1
        m = cfg.system.m
        return sol.z[tmpl.v_first:tmpl.v_first + m].copy()


class CommandSet:
    """Finite action set: velocity references with position-weight overrides."""

    def __init__(self, params: list[CommandParams], grid: TimeGrid, position_indices=(0, 1),
                 velocity_indices=(2, 3)):
        if not params:
            raise MpcError("command set is empty")
        self.params = list(params)
        self.grid = grid
        self.position_indices = tuple(position_indices)
        self.velocity_indices = tuple(velocity_indices)

    def __len__(self) -> int:
        return len(self.params)

    def command(self, a: int, origin) -> Command:
        return reference_from_command(self.params[a], origin, self.grid, self.position_indices,
                                      self.velocity_indices)


@dataclass
class BlockResult:
    states: np.ndarray
    inputs: np.ndarray
    failure: MpcInfeasibleError | None = None

    @property
    def infeasible(self) -> bool:
        return self.failure is not None


class BlockRunner:
    """Runs the closed loop (MPC plus fine-step plant) over one outer step.

    Noise is drawn from ``rng`` in blocks of ``substeps`` samples per inner
    step, so two runs that share a generator state see the same disturbance.
    """

    def __init__(self, cfg: MpcConfig, stepper, noise, commands: CommandSet, zeta: float | None = None,
                 cache: MpcProblemCache | None = None):
        self.cfg = cfg
        self.stepper = stepper
        self.noise = noise
        self.commands = commands
        self.zeta = zeta
        self.cache = cache or MpcProblemCache(cfg)

    def run(self, x0, action: int, rng, center=None, k: int = 0,
            controller: MpcController | None = None) -> BlockResult:
        cfg = self.cfg
        J, S, n = cfg.horizon, self.stepper.substeps, cfg.system.n
        x = np.asarray(x0, dtype=float).copy()
        ctrl = controller or MpcController(cfg, self.cache, self.zeta)
        origin = x if center is None else np.asarray(center, dtype=float)
        ctrl.begin_block(k, x, self.commands.command(action, origin), center)
        states = np.empty((J * S + 1, n))
        inputs = np.empty((J, cfg.system.m))
        states[0] = x
        for j in range(J):
            W = self.noise.sample(rng, S) if self.noise is not None else None
            try:
                u = ctrl.step(j, x)
            except MpcInfeasibleError as exc:
                return BlockResult(states[: j * S + 1], inputs[:j], exc)
            path = self.stepper.advance(x, u, W)
            states[j * S + 1:(j + 1) * S + 1] = path
            inputs[j] = u
            x = path[-1]
        return BlockResult(states, inputs)
