"""Random strictly convex QPs and an independent interior-point reference."""

import numpy as np

from reachavoid.qp import QuadraticProgram


def random_qp(rng, n=None, m_eq=None, m_in=None) -> QuadraticProgram:
    n = n or int(rng.integers(2, 30))
    m_eq = int(rng.integers(0, max(1, n // 3))) if m_eq is None else m_eq
    m_in = int(rng.integers(1, 3 * n)) if m_in is None else m_in
    M = rng.standard_normal((n, n))
    P = M @ M.T + rng.uniform(0.01, 1.0) * np.eye(n)
    q = rng.standard_normal(n) * rng.uniform(0.1, 10)
    x0 = rng.standard_normal(n)
    A_eq = rng.standard_normal((m_eq, n)) if m_eq else None
    b_eq = A_eq @ x0 if m_eq else None
    A_in = rng.standard_normal((m_in, n))
    slack = rng.uniform(0, 1, m_in) * (rng.uniform(0, 1, m_in) < 0.6)
    b_in = A_in @ x0 + slack
    return QuadraticProgram(P, q, A_eq, b_eq, A_in, b_in)


def reference_solution(p: QuadraticProgram) -> np.ndarray:
    import cvxopt
    from cvxopt import solvers

    solvers.options.update({"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12,
                            "maxiters": 200})
    m = cvxopt.matrix
    kw = {}
    if p.A_eq is not None and p.A_eq.shape[0]:
        kw = {"A": m(p.A_eq), "b": m(p.b_eq)}
    res = solvers.qp(m(p.P), m(p.q), m(p.A_in), m(p.b_in), **kw)
    return np.array(res["x"]).ravel()


def kkt_residuals(p: QuadraticProgram, sol) -> dict:
    """Stationarity, primal feasibility, dual sign and complementarity, computed from scratch."""
    z = sol.z
    grad = p.P @ z + p.q + p.A_in.T @ sol.y_in
    eq = 0.0
    if p.A_eq is not None and p.A_eq.shape[0]:
        grad = grad + p.A_eq.T @ sol.y_eq
        eq = float(np.max(np.abs(p.A_eq @ z - p.b_eq)))
    slack = p.b_in - p.A_in @ z
    return {"stationarity": float(np.max(np.abs(grad))), "equality": eq,
            "inequality": float(max(0.0, -slack.min())), "dual_sign": float(max(0.0, -sol.y_in.min())),
            "complementarity": float(np.max(np.abs(sol.y_in * slack)))}
