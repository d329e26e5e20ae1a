"""Constraint tightening: inter-sample growth bound, tube radius and tightened sets."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .geometry import HalfspacePolytope, HyperRect, pontryagin_erode_ball
from .lti import ModelError, StructuredLti, norm2

NORM_ZERO = 1e-12
MAX_ENUM_DIM = 8


class TighteningError(ValueError):
    pass


class UnboundedSetError(TighteningError):
    pass


class OverTightenedError(TighteningError):
    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"tightening empties the constraint set at row {index}")


def growth_bound_psi(norm_A: float, dt: float, norm_z0: float, norm_d: float) -> float:
    """Bound on ``||z(t) - z(0)||`` over ``[0, dt]`` for ``zdot = A z + d``."""
    for name, v in (("norm_A", norm_A), ("dt", dt), ("norm_z0", norm_z0), ("norm_d", norm_d)):
        if v < 0 or math.isnan(v):
            raise ValueError(f"{name} must be nonnegative")
    if norm_A < NORM_ZERO:
        return dt * norm_d
    g = math.expm1(norm_A * dt)
    return g * norm_z0 + g / norm_A * norm_d


def polytope_vertices(p: HalfspacePolytope, tol: float = 1e-9) -> np.ndarray:
    """Vertices of a bounded polytope by brute-force enumeration of active sets.

    Axis-aligned boxes take a fast path that works in any dimension.
    """
    H, b, n = p.normals, p.offsets, p.dim
    box = _as_box(p)
    if box is not None:
        lo, hi = box
        corners = np.array(list(itertools.product(*zip(lo, hi))), dtype=float)
        return np.unique(corners, axis=0)
    if n > MAX_ENUM_DIM:
        raise TighteningError(f"vertex enumeration limited to dimension {MAX_ENUM_DIM}; supply the bound explicitly")
    if not is_bounded(p):
        raise UnboundedSetError("polytope is unbounded")
    verts = []
    for rows in itertools.combinations(range(H.shape[0]), n):
        M = H[list(rows)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, b[list(rows)])
        if np.all(H @ v <= b + tol * (1 + np.abs(b))):
            verts.append(v)
    if not verts:
        raise TighteningError("polytope is empty")
    V = np.array(verts)
    return np.unique(np.round(V, 12), axis=0)


def _as_box(p: HalfspacePolytope):
    """Return (lo, hi) if every row constrains a single coordinate, else None."""
    H, b, n = p.normals, p.offsets, p.dim
    nz = np.count_nonzero(H, axis=1)
    if np.any(nz != 1):
        return None
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for h, bi in zip(H, b):
        i = int(np.flatnonzero(h)[0])
        if h[i] > 0:
            hi[i] = min(hi[i], bi / h[i])
        else:
            lo[i] = max(lo[i], bi / h[i])
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        return None
    if np.any(lo > hi):
        raise TighteningError("polytope is empty")
    return lo, hi


def is_bounded(p: HalfspacePolytope) -> bool:
    for i in range(p.dim):
        for s in (1.0, -1.0):
            c = np.zeros(p.dim)
            c[i] = -s
            res = linprog(c, A_ub=p.normals, b_ub=p.offsets, bounds=[(None, None)] * p.dim, method="highs")
            if res.status == 3:
                return False
    return True


def is_nonempty(p: HalfspacePolytope) -> bool:
    res = linprog(np.zeros(p.dim), A_ub=p.normals, b_ub=p.offsets,
                  bounds=[(None, None)] * p.dim, method="highs")
    return res.status == 0


def kappa_x(g_d: HalfspacePolytope) -> float:
    """Largest Euclidean norm over the deterministic constraint set."""
    V = polytope_vertices(g_d)
    return float(np.max(np.linalg.norm(V, axis=1)))


def kappa_u(B2: np.ndarray, u_set: HalfspacePolytope) -> float:
    """Largest ``||B2 u||`` over the input set, attained at a vertex."""
    V = polytope_vertices(u_set)
    return float(np.max(np.linalg.norm(V @ np.asarray(B2).T, axis=1)))


def compute_eta(sys: StructuredLti, g_d: HalfspacePolytope, u_set: HalfspacePolytope | None,
                dt: float, kappa_x_override: float | None = None):
    """Inter-sample tightening margin for the deterministic states.

    Returns ``(eta, kappa_x, kappa_u)``; ``kappa_x`` is infinite when it is not
    needed (``A_4 = 0``) and the constraint set is unbounded.
    """
    if not hasattr(sys, "A_c"):
        raise ModelError("the inter-sample margin needs the continuous-time model")
    ns = sys.n_s
    A4 = sys.A_c[ns:, ns:]
    B2 = sys.B_c[ns:, :]
    if g_d.dim != sys.n_d:
        raise ModelError("deterministic constraint set has the wrong dimension")
    u_set = sys.input_set if u_set is None else u_set
    ku = kappa_u(B2, u_set)
    nA = norm2(A4) if A4.size else 0.0
    if kappa_x_override is not None:
        kx = float(kappa_x_override)
    else:
        try:
            kx = kappa_x(g_d)
        except UnboundedSetError:
            if nA >= NORM_ZERO:
                raise UnboundedSetError(
                    "unbounded deterministic constraint set: supply kappa_x, a bound on ||x^d||") from None
            kx = math.inf
    if nA < NORM_ZERO:
        eta = dt * ku
    else:
        eta = growth_bound_psi(nA, dt, kx, ku)
    return float(eta), kx, ku


def compute_tube_radius(A_c, Dt: float, zeta: float, n: int, decoupled: bool | None = None) -> float:
    """Radius of a ball containing every error ``e^{A_c t} x``, ``x`` in a cell, ``t <= Dt``.

    The cell spans the first ``n`` coordinates. When those coordinates never
    enter the dynamics the error is constant and the exponential factor drops.
    """
    if Dt < 0 or zeta <= 0:
        raise ValueError("need Dt >= 0 and zeta > 0")
    A_c = np.atleast_2d(np.asarray(A_c, dtype=float))
    if decoupled is None:
        decoupled = bool(np.all(A_c[:, :n] == 0.0))
    base = 0.5 * zeta * math.sqrt(n)
    if decoupled:
        return base
    return math.exp(norm2(A_c) * Dt) * base


@dataclass(frozen=True)
class TighteningParams:
    eta: float
    kappa_x: float
    kappa_u: float
    r: float
    zeta: float

    def __post_init__(self):
        for name in ("eta", "kappa_u", "r", "zeta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.zeta == 0:
            raise ValueError("zeta must be positive")
        if math.isnan(self.kappa_x) or self.kappa_x < 0:
            raise ValueError("kappa_x must be nonnegative")

    def to_dict(self) -> dict:
        return {"eta": self.eta, "kappa_x": None if math.isinf(self.kappa_x) else self.kappa_x,
                "kappa_u": self.kappa_u, "r": self.r, "zeta": self.zeta}


def tightening_params(sys: StructuredLti, g_d: HalfspacePolytope, delta_t: float, Delta_t: float,
                      zeta: float, kappa_x_override: float | None = None) -> TighteningParams:
    eta, kx, ku = compute_eta(sys, g_d, sys.input_set, delta_t, kappa_x_override)
    r = compute_tube_radius(sys.A_c, Delta_t, zeta, sys.n_s)
    return TighteningParams(eta, kx, ku, r, zeta)


@dataclass(frozen=True)
class ZeroSet:
    """Terminal set ``x^d = 0``."""

    kind: str = "zero"


@dataclass(frozen=True)
class ValidatedPolytope:
    polytope: HalfspacePolytope
    kind: str = "polytope"


@dataclass(frozen=True, eq=False)
class ConstraintFamily:
    g: HalfspacePolytope
    g_hat: HalfspacePolytope
    g_tilde: HalfspacePolytope
    terminal: ZeroSet | ValidatedPolytope = field(default_factory=ZeroSet)
    params: TighteningParams | None = None

    def robust_terminal(self) -> HalfspacePolytope | None:
        """Terminal polytope for the robust problem, or None for the zero set.

        The cells only extend along the stochastic states, so eroding by a
        cell leaves a deterministic-state polytope unchanged; only the ball
        erosion remains.
        """
        if isinstance(self.terminal, ZeroSet):
            return None
        r = self.params.r if self.params is not None else 0.0
        return pontryagin_erode_ball(self.terminal.polytope, r)

    def to_dict(self) -> dict:
        out = {"g": self.g.to_dict(), "g_hat": self.g_hat.to_dict(), "g_tilde": self.g_tilde.to_dict(),
               "terminal": self.terminal.kind}
        if isinstance(self.terminal, ValidatedPolytope):
            out["terminal_polytope"] = self.terminal.polytope.to_dict()
        return out


def _first_infeasible_prefix(p: HalfspacePolytope) -> int | None:
    if is_nonempty(p):
        return None
    lo, hi = 1, p.n_constraints
    # smallest prefix length that is already empty
    while lo < hi:
        mid = (lo + hi) // 2
        sub = HalfspacePolytope(p.normals[:mid], p.offsets[:mid], p.dim)
        if is_nonempty(sub):
            lo = mid + 1
        else:
            hi = mid
    return lo - 1


def build_constraint_family(g: HalfspacePolytope, params: TighteningParams,
                            terminal: ZeroSet | ValidatedPolytope | str = "zero",
                            tilde_equals_hat: bool = False) -> ConstraintFamily:
    """Tighten ``g`` by ``eta`` (nominal) and ``eta + r`` (robust)."""
    if isinstance(terminal, str):
        if terminal != "zero":
            raise TighteningError("a polytope terminal set must be passed as ValidatedPolytope")
        terminal = ZeroSet()
    g_hat = pontryagin_erode_ball(g, params.eta)
    g_tilde = g_hat if tilde_equals_hat else pontryagin_erode_ball(g, params.eta + params.r)
    for p in (g_hat, g_tilde):
        idx = _first_infeasible_prefix(p)
        if idx is not None:
            raise OverTightenedError(idx)
    if isinstance(terminal, ZeroSet):
        bad = np.flatnonzero(g_tilde.offsets < 0)
        if bad.size:
            raise OverTightenedError(int(bad[0]), f"terminal set x^d = 0 violates tightened row {int(bad[0])}")
    return ConstraintFamily(g, g_hat, g_tilde, terminal, params)


def validate_terminal_invariance(term: HalfspacePolytope, A4, B2, g_tilde_d: HalfspacePolytope,
                                 u_set: HalfspacePolytope, disturbance_bound: float) -> bool:
    """Check that the terminal set can be held against bounded disturbances.

    For every vertex ``v`` of ``term`` and every vertex ``d`` of the
    infinity-ball of radius ``disturbance_bound``, an LP looks for an input
    ``u`` in ``u_set`` with ``A4 v + B2 u + d`` in ``term``; ``v`` must also lie
    in ``g_tilde_d``. By convexity this is sufficient for the whole polytope.
    """
    A4 = np.atleast_2d(np.asarray(A4, dtype=float))
    B2 = np.atleast_2d(np.asarray(B2, dtype=float))
    nd, m = B2.shape
    V = polytope_vertices(term)
    if disturbance_bound > 0:
        D = np.array(list(itertools.product((-disturbance_bound, disturbance_bound), repeat=nd)))
    else:
        D = np.zeros((1, nd))
    H, b = term.normals, term.offsets
    A_ub = np.vstack([H @ B2, u_set.normals])
    for vi, v in enumerate(V):
        if not g_tilde_d.contains(v):
            return False
        for d in D:
            b_ub = np.concatenate([b - H @ (A4 @ v + d), u_set.offsets])
            res = linprog(np.zeros(m), A_ub=A_ub, b_ub=b_ub + 1e-12, bounds=[(None, None)] * m, method="highs")
            if res.status == 2:
                return False
            if res.status != 0:
                raise TighteningError(f"LP failed at terminal vertex {vi}: {res.message}")
    return True


def cell_rect(center, zeta: float) -> HyperRect:
    c = np.asarray(center, dtype=float)
    return HyperRect(c, np.full(c.size, 0.5 * zeta))
