"""Block-structured LTI systems, zero-order-hold discretisation and fine simulation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.linalg

from .geometry import HalfspacePolytope


class ModelError(ValueError):
    pass


class ControllerFailure(RuntimeError):
    """Raised when the input callback fails during simulation."""

    def __init__(self, time: float, step: int, cause: BaseException):
        super().__init__(f"controller failed at t={time:.6g}s (interval {step}): {cause}")
        self.time = time
        self.step = step
        self.cause = cause


# stream tags so derived generators for different purposes never collide
STREAM_KERNEL = 1
STREAM_EVAL = 2
STREAM_COMMANDS = 3
STREAM_TEST = 4


def derive_rng(root: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream ``(root, *keys)``."""
    seq = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def matrix_exponential(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ModelError("matrix exponential needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise ModelError("matrix has non-finite entries")
    return scipy.linalg.expm(M)


def norm2(M) -> float:
    """Spectral norm (largest singular value)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def _mat(x, rows=None, cols=None, name="matrix"):
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    if rows is not None and arr.shape[0] != rows:
        raise ModelError(f"{name} has {arr.shape[0]} rows, expected {rows}")
    if cols is not None and arr.shape[1] != cols:
        raise ModelError(f"{name} has {arr.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class StructuredLti:
    """Continuous-time system ``xdot = A_c x + B_c u + E_c w``.

    The first ``n_s`` states are stochastic, the rest deterministic: the
    deterministic rows of ``E_c`` and the lower-left block of ``A_c`` vanish.
    """

    A_c: np.ndarray
    B_c: np.ndarray
    E_c: np.ndarray
    n_s: int
    input_set: HalfspacePolytope

    def __post_init__(self):
        A = _mat(self.A_c, name="A_c")
        n = A.shape[0]
        if A.shape[1] != n:
            raise ModelError("A_c must be square")
        B = _mat(self.B_c, rows=n, name="B_c")
        E = _mat(self.E_c, rows=n, name="E_c")
        if not 0 <= self.n_s <= n:
            raise ModelError("n_s out of range")
        ns = self.n_s
        if np.any(A[ns:, :ns] != 0.0):
            raise ModelError("lower-left block of A_c must be zero")
        if np.any(E[ns:, :] != 0.0):
            raise ModelError("deterministic rows of E_c must be zero")
        if self.input_set.dim != B.shape[1]:
            raise ModelError("input set dimension does not match B_c")
        for arr in (A, B, E):
            arr.setflags(write=False)
        object.__setattr__(self, "A_c", A)
        object.__setattr__(self, "B_c", B)
        object.__setattr__(self, "E_c", E)

    @property
    def n(self) -> int:
        return self.A_c.shape[0]

    @property
    def m(self) -> int:
        return self.B_c.shape[1]

    @property
    def n_w(self) -> int:
        return self.E_c.shape[1]

    @property
    def n_d(self) -> int:
        return self.n - self.n_s

    def positions_decoupled(self) -> bool:
        """True when the stochastic states never feed back into ``xdot``."""
        return bool(np.all(self.A_c[:, : self.n_s] == 0.0))


@dataclass(frozen=True, eq=False)
class DiscreteLti:
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    step: float
    n_s: int

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def A4(self) -> np.ndarray:
        return self.A[self.n_s :, self.n_s :]

    @property
    def B2(self) -> np.ndarray:
        return self.B[self.n_s :, :]

    @property
    def A1(self) -> np.ndarray:
        return self.A[: self.n_s, : self.n_s]

    @property
    def A2(self) -> np.ndarray:
        return self.A[: self.n_s, self.n_s :]

    @property
    def B1(self) -> np.ndarray:
        return self.B[: self.n_s, :]

    @property
    def E1(self) -> np.ndarray:
        return self.E[: self.n_s, :]


def discretize(sys: StructuredLti, dt: float) -> DiscreteLti:
    """Exact zero-order-hold discretisation via one augmented exponential."""
    if not (dt > 0 and math.isfinite(dt)):
        raise ModelError("sampling time must be positive")
    n, m, nw = sys.n, sys.m, sys.n_w
    aug = np.zeros((n + m + nw, n + m + nw))
    aug[:n, :n] = sys.A_c
    aug[:n, n : n + m] = sys.B_c
    aug[:n, n + m :] = sys.E_c
    Phi = matrix_exponential(aug * dt)
    A = Phi[:n, :n].copy()
    B = Phi[:n, n : n + m].copy()
    E = Phi[:n, n + m :].copy()
    A[sys.n_s :, : sys.n_s] = 0.0
    E[sys.n_s :, :] = 0.0
    return DiscreteLti(A, B, E, float(dt), sys.n_s)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """I.i.d. Gaussian disturbance redrawn every ``sample_interval`` seconds."""

    mean: np.ndarray
    covariance: np.ndarray
    sample_interval: float = 1e-3
    kind: str = "gaussian-iid"
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = _mat(self.covariance, rows=mu.size, cols=mu.size, name="covariance")
        if not np.allclose(cov, cov.T, atol=1e-14):
            raise ModelError("covariance must be symmetric")
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-12 * max(1.0, abs(vals).max()):
            raise ModelError("covariance must be positive semidefinite")
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_factor", factor)

    @property
    def n_w(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        z = rng.standard_normal((count, self.n_w))
        return self.mean + z @ self._factor.T

    @classmethod
    def zero(cls, n_w: int, sample_interval: float = 1e-3) -> "NoiseModel":
        return cls(np.zeros(n_w), np.zeros((n_w, n_w)), sample_interval)


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


@dataclass(frozen=True)
class TimeGrid:
    """Horizon ``T`` split into ``N`` outer steps of ``J`` inner steps each."""

    T: Fraction
    N: int
    J: int
    sim_step: Fraction

    def __post_init__(self):
        T, s = _frac(self.T), _frac(self.sim_step)
        if T <= 0 or self.N < 1 or self.J < 1 or s <= 0:
            raise ModelError("time grid needs T > 0, N >= 1, J >= 1, sim_step > 0")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "sim_step", s)
        ratio = self.delta_frac / s
        if ratio.denominator != 1:
            raise ModelError("sim_step must divide the inner step")

    @property
    def Delta_frac(self) -> Fraction:
        return self.T / self.N

    @property
    def delta_frac(self) -> Fraction:
        return self.T / (self.N * self.J)

    @property
    def Delta_t(self) -> float:
        return float(self.Delta_frac)

    @property
    def delta_t(self) -> float:
        return float(self.delta_frac)

    @property
    def substeps(self) -> int:
        return int(self.delta_frac / self.sim_step)

    def time(self, k: int, j: int = 0, s: int = 0) -> float:
        return float(k * self.Delta_frac + j * self.delta_frac + s * self.sim_step)


class FineStepper:
    """Advances the state over one inner step at ``sim_step`` resolution.

    The substep recursion is unrolled into stacked matrices so that a whole
    inner step (and a whole batch of trajectories) costs one matrix product.
    """

    def __init__(self, sys: StructuredLti, delta_t: float, sim_step: float):
        ratio = delta_t / sim_step
        S = int(round(ratio))
        if S < 1 or abs(S - ratio) > 1e-9 * max(1.0, ratio):
            raise ModelError("sim_step must divide delta_t")
        d = discretize(sys, sim_step)
        n, m, nw = sys.n, sys.m, sys.n_w
        Phi = np.zeros((S, n, n))
        Gam = np.zeros((S, n, m))
        Psi = np.zeros((S, n, S, nw))
        Ak = np.eye(n)
        acc = np.zeros((n, m))
        powers = [np.eye(n)]
        for s in range(S):
            acc = d.A @ acc + d.B
            Ak = d.A @ Ak
            Phi[s], Gam[s] = Ak, acc
            powers.append(Ak)
        AE = [P @ d.E for P in powers]
        for s in range(S):
            for l in range(s + 1):
                Psi[s, :, l, :] = AE[s - l]
        self.sys = sys
        self.substeps = S
        self.sim_step = sim_step
        self.delta_t = delta_t
        self.discrete = d
        self._phi = Phi.reshape(S * n, n)
        self._gam = Gam.reshape(S * n, m)
        self._psi = Psi.reshape(S * n, S * nw)

    def advance(self, x0, u, W=None) -> np.ndarray:
        """Return the ``(S, n)`` states after each substep."""
        n = self.sys.n
        out = self._phi @ x0 + self._gam @ u
        if W is not None:
            out = out + self._psi @ np.asarray(W).reshape(-1)
        return out.reshape(self.substeps, n)

    def advance_batch(self, X0, U, W=None) -> np.ndarray:
        """Batched :meth:`advance`; returns ``(batch, S, n)``."""
        n = self.sys.n
        out = X0 @ self._phi.T + U @ self._gam.T
        if W is not None:
            out = out + np.asarray(W).reshape(W.shape[0], -1) @ self._psi.T
        return out.reshape(X0.shape[0], self.substeps, n)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    delta_marks: np.ndarray
    Delta_marks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def to_csv(self, path) -> None:
        n, m = self.states.shape[1], self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)])
            for t, x, u in zip(self.times, self.states, self.inputs):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])


def simulate_fine(
    sys: StructuredLti,
    x0,
    controller,
    noise: NoiseModel | None,
    duration: float,
    sim_step: float,
    rng: np.random.Generator | None = None,
    delta_t: float | None = None,
    outer_every: int | None = None,
    stepper: FineStepper | None = None,
) -> Trajectory:
    """Simulate with inputs held over each ``delta_t`` and noise redrawn each ``sim_step``.

    ``controller(step, t, x)`` is called at every ``delta_t`` boundary.
    """
    if delta_t is None:
        delta_t = sim_step
    if stepper is None:
        stepper = FineStepper(sys, delta_t, sim_step)
    S = stepper.substeps
    count = int(round(duration / delta_t))
    if abs(count * delta_t - duration) > 1e-9 * max(1.0, duration):
        raise ModelError("duration must be a multiple of delta_t")
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    states = np.empty((count * S + 1, sys.n))
    inputs = np.empty((count * S + 1, sys.m))
    states[0] = x
    for q in range(count):
        t = q * delta_t
        try:
            u = np.asarray(controller(q, t, x), dtype=float).reshape(-1)
        except Exception as exc:
            raise ControllerFailure(t, q, exc) from exc
        W = noise.sample(rng, S) if noise is not None else None
        path = stepper.advance(x, u, W)
        states[q * S + 1 : (q + 1) * S + 1] = path
        inputs[q * S : (q + 1) * S] = u
        x = path[-1]
    inputs[-1] = inputs[-2] if count else 0.0
    times = np.arange(count * S + 1) * sim_step
    marks = np.arange(count + 1) * S
    outer = marks[::outer_every] if outer_every else np.zeros(0, dtype=int)
    return Trajectory(times, states, inputs, marks, outer)
