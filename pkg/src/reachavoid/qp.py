"""Dense convex QP solver: alternating-direction splitting with over-relaxation.

Solves ``min 1/2 z'Pz + q'z  s.t.  A_eq z = b_eq,  A_in z <= b_in``.

Internally the constraints are stacked as ``l <= C z <= u``. The iteration is
the standard operator-splitting scheme with Ruiz equilibration and step-size
adaptation. Once the iterate is close, the active set it implies is solved
exactly from the KKT system ("polishing"); a caller-supplied active-set guess
is tried first, which is what makes warm-started receding-horizon solves cheap.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max-iter"


class QpError(ValueError):
    pass


@dataclass(eq=False)
class QuadraticProgram:
    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        n = P.shape[0]
        if P.shape != (n, n):
            raise QpError("P must be square")
        P = 0.5 * (P + P.T)
        if n:
            lam = np.linalg.eigvalsh(P).min()
            if lam < -1e-10 * max(1.0, np.abs(P).max()):
                raise QpError(f"P is not positive semidefinite (min eigenvalue {lam:.3g})")
        q = np.asarray(self.q, dtype=float).reshape(-1)
        if q.size != n:
            raise QpError("q has wrong length")
        self.P, self.q = P, q
        self.A_eq, self.b_eq = self._pair(self.A_eq, self.b_eq, n, "equality")
        self.A_in, self.b_in = self._pair(self.A_in, self.b_in, n, "inequality")

    @staticmethod
    def _pair(A, b, n, what):
        if A is None:
            return np.zeros((0, n)), np.zeros(0)
        A = np.asarray(A, dtype=float).reshape(-1, n)
        b = np.asarray(b, dtype=float).reshape(-1)
        if A.shape[0] != b.size:
            raise QpError(f"{what} matrix and vector disagree in row count")
        return A, b

    @property
    def n(self) -> int:
        return self.q.size


@dataclass
class QpSolution:
    z: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    y_eq: np.ndarray
    y_in: np.ndarray
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def active_set(self, tol: float = 1e-9) -> np.ndarray:
        """Indices of inequality rows with a positive multiplier."""
        return np.flatnonzero(self.y_in > tol)


class QpSolver:
    """Workspace for a family of QPs sharing ``P``, ``A_eq`` and ``A_in``.

    Only ``q``, ``b_eq`` and ``b_in`` may change between :meth:`solve` calls;
    scaling and factorisations are computed once.
    """

    def __init__(self, P, A_eq=None, A_in=None, *, sigma=1e-6, rho=0.1, alpha=1.6,
                 scaling_iters=10, check_every=10, adapt_every=50):
        n = np.atleast_2d(P).shape[0]

        def zeros_rhs(A):
            return None if A is None else np.zeros(np.asarray(A).reshape(-1, n).shape[0])

        proto = QuadraticProgram(P, np.zeros(n), A_eq, zeros_rhs(A_eq), A_in, zeros_rhs(A_in))
        self.n = proto.n
        self.n_eq = proto.A_eq.shape[0]
        self.n_in = proto.A_in.shape[0]
        self.P = proto.P
        self.C = np.vstack([proto.A_eq, proto.A_in])
        self.sigma, self.alpha = sigma, alpha
        self.check_every, self.adapt_every = check_every, adapt_every
        self._scale(scaling_iters)
        self.rho_base = rho
        self._rho_vec = self._rho_vector(rho)
        self._factor()
        self._kkt_cache: dict = {}

    # -- setup -------------------------------------------------------------

    def _scale(self, iters):
        n, mc = self.n, self.C.shape[0]
        D = np.ones(n)
        E = np.ones(mc)
        P, C = self.P.copy(), self.C.copy()
        for _ in range(iters):
            col = np.abs(P).max(axis=0) if n else np.zeros(0)
            if mc:
                col = np.maximum(col, np.abs(C).max(axis=0))
            dD = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
            dE = 1.0 / np.sqrt(np.clip(np.abs(C).max(axis=1), 1e-4, 1e4)) if mc else np.ones(0)
            P = dD[:, None] * P * dD[None, :]
            C = dE[:, None] * C * dD[None, :]
            D *= dD
            E *= dE
        pmean = np.abs(P).max(axis=0).mean() if n else 1.0
        c = 1.0 / np.clip(pmean, 1e-4, 1e4)
        self.D, self.E, self.c = D, E, c
        self.Ps = c * P
        self.Cs = C

    def _rho_vector(self, rho):
        v = np.full(self.C.shape[0], rho)
        v[: self.n_eq] *= 1e3
        return v

    def _factor(self):
        K = self.Ps + self.sigma * np.eye(self.n)
        if self.C.shape[0]:
            K = K + self.Cs.T @ (self._rho_vec[:, None] * self.Cs)
        self._chol = scipy.linalg.cho_factor(K)

    # -- helpers -----------------------------------------------------------

    def _bounds(self, b_eq, b_in):
        b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)
        b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).reshape(-1)
        if b_eq.size != self.n_eq or b_in.size != self.n_in:
            raise QpError("right-hand side has wrong length")
        l = np.concatenate([b_eq, np.full(self.n_in, -np.inf)])
        u = np.concatenate([b_eq, b_in])
        return l, u

    def _residuals(self, x, y, q, l, u):
        Cx = self.C @ x
        prim = 0.0
        if Cx.size:
            prim = float(max(np.max(Cx - u, initial=0.0), np.max(l - Cx, initial=0.0)))
        dual = float(np.max(np.abs(self.P @ x + q + self.C.T @ y), initial=0.0))
        return prim, dual

    def _solution(self, x, y, status, prim, dual, it, polished=False):
        return QpSolution(x, status, prim, dual, it, y[: self.n_eq].copy(), y[self.n_eq:].copy(), polished)

    def _kkt(self, active_lo, active_hi, q, l, u):
        """Solve the equality-constrained QP for an active set; None if singular."""
        eq = np.arange(self.n_eq)
        lo = np.asarray(active_lo, dtype=int)
        hi = np.asarray(active_hi, dtype=int)
        rows = np.concatenate([eq, lo, hi])
        n, k = self.n, rows.size
        key = rows.tobytes()
        fac = self._kkt_cache.get(key)
        if fac is None:
            Ca = self.Cs[rows]
            K = np.zeros((n + k, n + k))
            K[:n, :n] = self.Ps
            K[:n, n:] = Ca.T
            K[n:, :n] = Ca
            fac = None
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                    lu = scipy.linalg.lu_factor(K, check_finite=False)
                piv = np.abs(np.diag(lu[0]))
                if np.all(np.isfinite(piv)) and piv.min() >= 1e-12 * max(1.0, piv.max()):
                    fac = ("lu", lu)
            except (np.linalg.LinAlgError, ValueError):
                pass
            if fac is None:
                # degenerate active set: minimum-norm multipliers
                fac = ("pinv", K, np.linalg.pinv(K, rcond=1e-12))
            if len(self._kkt_cache) > 512:
                self._kkt_cache.clear()
            self._kkt_cache[key] = fac
        rhs = np.concatenate([-self.c * self.D * q, self.E[rows] * np.concatenate([l[eq], l[lo], u[hi]])])
        if fac[0] == "lu":
            sol = scipy.linalg.lu_solve(fac[1], rhs, check_finite=False)
        else:
            sol = fac[2] @ rhs
        if not np.all(np.isfinite(sol)):
            return None
        x = self.D * sol[:n]
        y = np.zeros(self.C.shape[0])
        y[rows] = self.E[rows] * sol[n:] / self.c
        return x, y

    def _check(self, x, y, lo, hi, q, l, u, tol):
        if np.any(y[np.asarray(lo, dtype=int)] > tol) or np.any(y[np.asarray(hi, dtype=int)] < -tol):
            return None
        prim, dual = self._residuals(x, y, q, l, u)
        if prim > tol or dual > tol:
            return None
        return x, y, prim, dual

    def _polish(self, active_lo, active_hi, q, l, u, tol):
        """Solve the KKT system for a given active set; None if it is not optimal."""
        sol = self._kkt(active_lo, active_hi, q, l, u)
        if sol is None:
            return None
        return self._check(*sol, active_lo, active_hi, q, l, u, tol)

    def _active_set_search(self, guess, q, l, u, tol, rounds=25):
        """Primal-dual active-set iteration over the upper-bounded inequality rows.

        Starts from ``guess`` and updates the active set from the sign of
        ``y + (Cz - u)`` in scaled units. It has no convergence guarantee; the
        caller falls back to the splitting iteration when it stalls.
        """
        none = np.zeros(0, dtype=int)
        ineq = np.arange(self.n_eq, self.C.shape[0])
        finite = np.isfinite(u[ineq])
        active = np.asarray(guess, dtype=int)
        seen = set()
        for _ in range(rounds):
            key = active.tobytes()
            if key in seen:
                return None
            seen.add(key)
            sol = self._kkt(none, active, q, l, u)
            if sol is None:
                return None
            hit = self._check(*sol, none, active, q, l, u, tol)
            if hit is not None:
                return hit
            x, y = sol
            Es = self.E[ineq]
            score = Es * (self.C[ineq] @ x - u[ineq]) + self.c * y[ineq] / Es
            new = ineq[finite & (score > 0)]
            if np.array_equal(new, active):
                return None
            active = new
        return None

    # -- main entry --------------------------------------------------------

    def solve(self, q, b_eq=None, b_in=None, *, tol=1e-8, max_iter=20_000,
              warm_start=None, active_guess=None) -> QpSolution:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.size != self.n:
            raise QpError("q has wrong length")
        l, u = self._bounds(b_eq, b_in)
        if np.any(l > u):
            raise QpError("lower bound exceeds upper bound")

        # active-set guess first: one KKT solve when it is right
        guess = np.zeros(0, dtype=int) if active_guess is None else np.asarray(active_guess, dtype=int)
        hit = self._active_set_search(self.n_eq + guess, q, l, u, tol)
        if hit is not None:
            x, y, prim, dual = hit
            return self._solution(x, y, OPTIMAL, prim, dual, 0, polished=True)
        return self._admm(q, l, u, tol, max_iter, warm_start)

    def _admm(self, q, l, u, tol, max_iter, warm_start):
        D, E, c = self.D, self.E, self.c
        qs = c * D * q
        ls, us = E * l, E * u
        mc = self.C.shape[0]
        if warm_start is not None:
            x = np.asarray(warm_start, dtype=float).reshape(-1) / D
        else:
            x = np.zeros(self.n)
        z = np.clip(self.Cs @ x, ls, us) if mc else np.zeros(0)
        y = np.zeros(mc)
        rho = self._rho_vec.copy()
        chol = self._chol
        sigma, alpha = self.sigma, self.alpha
        polish_at = 1e-3
        y_prev = y.copy()
        x_prev = x.copy()
        prim = dual = np.inf
        Ps, Cs = self.Ps, self.Cs
        for it in range(1, max_iter + 1):
            rhs = sigma * x - qs
            if mc:
                rhs = rhs + Cs.T @ (rho * z - y)
            xt = scipy.linalg.cho_solve(chol, rhs, check_finite=False)
            zt = Cs @ xt
            x = alpha * xt + (1 - alpha) * x
            if mc:
                zr = alpha * zt + (1 - alpha) * z
                z_new = np.clip(zr + y / rho, ls, us)
                y = y + rho * (zr - z_new)
                z = z_new
            if it % self.check_every and it != max_iter:
                continue
            xu = D * x
            yu = E * y / c
            prim, dual = self._residuals(xu, yu, q, l, u)
            prim_s = float(np.max(np.abs(Cs @ x - z), initial=0.0))
            if prim <= tol and dual <= tol:
                return self._solution(xu, yu, OPTIMAL, prim, dual, it)
            if max(prim, dual) <= polish_at:
                zu = z / E if mc else z
                ineq = np.arange(mc) >= self.n_eq
                lo = np.flatnonzero(ineq & np.isfinite(l) & (zu - l < -yu))
                hi = np.flatnonzero(ineq & (u - zu < yu))
                hit = self._polish(lo, hi, q, l, u, tol)
                if hit is not None:
                    xp, yp, pp, dp = hit
                    return self._solution(xp, yp, OPTIMAL, pp, dp, it, polished=True)
                polish_at = max(polish_at * 0.1, tol)
            status = self._infeasibility(x - x_prev, y - y_prev, qs, ls, us)
            if status is not None:
                return self._solution(xu, yu, status, prim, dual, it)
            x_prev, y_prev = x.copy(), y.copy()
            if mc and it % self.adapt_every == 0:
                pn = prim_s / max(np.max(np.abs(Cs @ x), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-12)
                dn = np.max(np.abs(Ps @ x + qs + Cs.T @ y), initial=0.0) / max(
                    np.max(np.abs(Ps @ x), initial=0.0), np.max(np.abs(Cs.T @ y), initial=0.0),
                    np.max(np.abs(qs), initial=0.0), 1e-12)
                scale = np.sqrt(pn / max(dn, 1e-12))
                if scale > 5.0 or scale < 0.2:
                    new = np.clip(rho * scale, 1e-6, 1e6)
                    rho = new
                    K = Ps + sigma * np.eye(self.n) + Cs.T @ (rho[:, None] * Cs)
                    chol = scipy.linalg.cho_factor(K)
        xu, yu = D * x, E * y / c
        return self._solution(xu, yu, MAX_ITER, prim, dual, max_iter)

    def _infeasibility(self, dx, dy, qs, ls, us, eps=1e-7):
        mc = self.C.shape[0]
        if mc:
            ndy = np.max(np.abs(self.E * dy), initial=0.0)
            if ndy > 1e-12:
                ct = np.max(np.abs((self.Cs.T @ dy) / self.D), initial=0.0)
                pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
                with np.errstate(invalid="ignore"):
                    up = np.where(pos > 0, us * pos, 0.0)
                    lo = np.where(neg < 0, ls * neg, 0.0)
                support = float(np.sum(up) + np.sum(lo))
                if ct <= eps * ndy and support < -eps * ndy:
                    return INFEASIBLE
        ndx = np.max(np.abs(self.D * dx), initial=0.0)
        if ndx > 1e-12:
            if np.max(np.abs(self.D * (self.Ps @ dx)), initial=0.0) <= eps * ndx * self.c and qs @ dx < -eps * ndx * self.c:
                cdx = (self.Cs @ dx) / self.E if mc else np.zeros(0)
                tol = eps * ndx
                ok = np.all(np.where(np.isfinite(us), cdx <= tol, True)) and np.all(
                    np.where(np.isfinite(ls), cdx >= -tol, True))
                if ok:
                    return UNBOUNDED
        return None


def solve_qp(p: QuadraticProgram, tol: float = 1e-8, max_iter: int = 20_000,
             warm_start=None, active_guess=None) -> QpSolution:
    """Solve ``p`` from scratch."""
    solver = QpSolver(p.P, p.A_eq, p.A_in)
    return solver.solve(p.q, p.b_eq, p.b_in, tol=tol, max_iter=max_iter,
                        warm_start=warm_start, active_guess=active_guess)
