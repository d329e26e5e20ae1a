"""Backward value iteration on the grid abstraction.

Values live on the full grid: target cells hold 1, unsafe cells 0, safe cells
the recursion. The robust recursion replaces the value of every safe landing
cell by the minimum over its neighbourhood (an erosion of the value field),
which turns the worst case into a plain expectation against the eroded field.
"""

from __future__ import annotations

import hashlib
import io
import itertools
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .abstraction import SAFE, TARGET, GridAbstraction, KernelRows, NeighborhoodIndex

NO_OP = -1
TIE_BREAK = "lowest-action-index"


@dataclass(eq=False)
class ValueTable:
    values: np.ndarray  # (N + 1, n_cells)
    robust: bool

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def at(self, k: int, cell: int) -> float:
        return float(self.values[k, cell])


@dataclass(eq=False)
class Policy:
    actions: np.ndarray  # (N, n_cells), NO_OP outside the safe cells
    tie_break: str = TIE_BREAK

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def __call__(self, k: int, cell: int) -> int:
        return int(self.actions[k, cell])


def _boundary_values(grid: GridAbstraction, terminal_safe: np.ndarray | None = None) -> np.ndarray:
    V = np.where(grid.classes == TARGET, 1.0, 0.0)
    if terminal_safe is not None:
        V = np.where(grid.classes == SAFE, terminal_safe, V)
    return V


def _backup(rows: KernelRows, W: np.ndarray, safe: np.ndarray, extra: np.ndarray | None = None,
            target_value: float = 1.0):
    """Per-action expectations on the safe cells, shape (A, n_safe)."""
    A = rows.n_actions
    Qv = np.empty((A, safe.size))
    for a in range(A):
        q = target_value * rows.target[a, safe] + rows.safe[a][safe] @ W
        if extra is not None:
            q = q + extra[a, safe]
        Qv[a] = q
    return Qv


def _iterate(rows: KernelRows, grid: GridAbstraction, N: int, nbhd: NeighborhoodIndex | None):
    safe = grid.safe_indices
    V = np.empty((N + 1, grid.n_cells))
    pol = np.full((N, grid.n_cells), NO_OP, dtype=np.int32)
    V[N] = _boundary_values(grid)
    for k in range(N - 1, -1, -1):
        nxt = V[k + 1]
        W = nbhd.erode(nxt) if nbhd is not None else nxt
        Qv = _backup(rows, W, safe)
        best = np.argmax(Qv, axis=0)
        V[k] = nxt
        V[k, safe] = Qv[best, np.arange(safe.size)]
        pol[k, safe] = best
    np.clip(V, 0.0, 1.0, out=V)
    return V, pol


def robust_value_iteration(rows: KernelRows, grid: GridAbstraction, nbhd: NeighborhoodIndex, N: int):
    """Certified lower bound: every safe landing cell takes its neighbourhood minimum."""
    V, pol = _iterate(rows, grid, N, nbhd)
    return ValueTable(V, True), Policy(pol)


def plain_value_iteration(rows: KernelRows, grid: GridAbstraction, N: int):
    V, pol = _iterate(rows, grid, N, None)
    return ValueTable(V, False), Policy(pol)


def evaluate_policy_values(rows: KernelRows, grid: GridAbstraction, policy: Policy,
                           nbhd: NeighborhoodIndex | None = None) -> np.ndarray:
    """Reach-avoid value of a fixed policy; robust when ``nbhd`` is given."""
    N = policy.horizon
    safe = grid.safe_indices
    V = np.empty((N + 1, grid.n_cells))
    V[N] = _boundary_values(grid)
    for k in range(N - 1, -1, -1):
        W = nbhd.erode(V[k + 1]) if nbhd is not None else V[k + 1]
        Qv = _backup(rows, W, safe)
        V[k] = V[k + 1]
        V[k, safe] = Qv[policy.actions[k, safe], np.arange(safe.size)]
    return np.clip(V, 0.0, 1.0)


def evaluate_policy_cost(rows: KernelRows, grid: GridAbstraction, policy: Policy) -> np.ndarray:
    """Expected accumulated stage cost of a fixed policy (zero once absorbed)."""
    if rows.cost is None:
        raise ValueError("kernel rows carry no stage costs")
    N = policy.horizon
    safe = grid.safe_indices
    C = np.zeros((N + 1, grid.n_cells))
    for k in range(N - 1, -1, -1):
        Qv = _backup(rows, C[k + 1], safe, rows.cost, target_value=0.0)
        C[k, safe] = Qv[policy.actions[k, safe], np.arange(safe.size)]
    return C


@dataclass(frozen=True)
class LagrangianObjective:
    kappa: float
    alpha: float = 0.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class ParetoPoint:
    kappa: float
    expected_cost: float
    reach_prob: float
    certified_reach: float
    objective: float


def lagrangian_value_iteration(rows: KernelRows, grid: GridAbstraction, obj: LagrangianObjective, N: int,
                               nbhd: NeighborhoodIndex | None = None, start: int | None = None):
    """Maximise ``E[sum g_k + kappa * 1{reached}]`` with a zero terminal cost.

    Returns ``(values, policy, point)`` where ``point`` holds the policy's
    expected cost and plain reach probability at ``start`` (default: the
    grid's initial cell), plus the robust reach value when ``nbhd`` is given.
    """
    if rows.cost is None:
        raise ValueError("kernel rows carry no stage costs")
    safe = grid.safe_indices
    V = np.empty((N + 1, grid.n_cells))
    pol = np.full((N, grid.n_cells), NO_OP, dtype=np.int32)
    V[N] = np.where(grid.classes == TARGET, obj.kappa, 0.0)
    for k in range(N - 1, -1, -1):
        Qv = _backup(rows, V[k + 1], safe, rows.cost, target_value=obj.kappa)
        best = np.argmax(Qv, axis=0)
        V[k] = V[k + 1]
        V[k, safe] = Qv[best, np.arange(safe.size)]
        pol[k, safe] = best
    policy = Policy(pol)
    c0 = grid.initial_index if start is None else start
    cost = evaluate_policy_cost(rows, grid, policy)[0, c0]
    reach = evaluate_policy_values(rows, grid, policy)[0, c0]
    cert = evaluate_policy_values(rows, grid, policy, nbhd)[0, c0] if nbhd is not None else float("nan")
    point = ParetoPoint(obj.kappa, float(cost), float(reach), float(cert),
                        float(cost + obj.kappa * (reach - obj.alpha)))
    return ValueTable(V, False), policy, point


def pareto_sweep(rows: KernelRows, grid: GridAbstraction, kappas, N: int, nbhd: NeighborhoodIndex | None = None,
                 alpha: float = 0.0):
    points, policies = [], []
    for kappa in kappas:
        _, pol, pt = lagrangian_value_iteration(rows, grid, LagrangianObjective(float(kappa), alpha), N, nbhd)
        points.append(pt)
        policies.append(pol)
    return points, policies


def pareto_monotone_chain(points) -> int:
    """Longest chain along which certified reach rises while expected cost strictly falls."""
    pts = sorted(points, key=lambda p: (p.certified_reach, -p.expected_cost))
    best = [1] * len(pts)
    for i in range(len(pts)):
        for j in range(i):
            if pts[j].certified_reach < pts[i].certified_reach and pts[j].expected_cost > pts[i].expected_cost:
                best[i] = max(best[i], best[j] + 1)
    return max(best, default=0)


def reach_monotone_in_kappa(points) -> bool:
    """Diagnostic only: whether plain reach probability is nondecreasing in kappa."""
    pts = sorted(points, key=lambda p: p.kappa)
    return all(b.reach_prob >= a.reach_prob - 1e-12 for a, b in zip(pts, pts[1:]))


def execute_policy(policy: Policy, grid: GridAbstraction, x_k, k: int) -> int:
    """Action for state ``x_k`` at stage ``k``; NO_OP when absorbed or off the grid."""
    cell = int(grid.locate(np.asarray(x_k, dtype=float)[: grid.dim])[0])
    if cell < 0 or k >= policy.horizon:
        return NO_OP
    return policy(k, cell)


def table_digest(values: ValueTable, policy: Policy) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(values.values).tobytes())
    h.update(np.ascontiguousarray(policy.actions).tobytes())
    return h.hexdigest()


def save_tables(path, values: ValueTable, policy: Policy, header: dict) -> None:
    """Versioned archive of values and policy with a JSON header.

    Members carry a fixed timestamp so identical tables give identical bytes.
    """
    hdr = dict(header, version=1, robust=values.robust, N=values.horizon, tie_break=policy.tie_break)
    members = {"header.json": json.dumps(hdr, sort_keys=True).encode()}
    for name, arr in (("values.npy", values.values), ("policy.npy", policy.actions)):
        buf = io.BytesIO()
        np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
        members[name] = buf.getvalue()
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, data in members.items():
            zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data)


def load_tables(path):
    with zipfile.ZipFile(path) as zf:
        hdr = json.loads(zf.read("header.json").decode())
        V = np.lib.format.read_array(io.BytesIO(zf.read("values.npy")), allow_pickle=False)
        P = np.lib.format.read_array(io.BytesIO(zf.read("policy.npy")), allow_pickle=False)
    return ValueTable(V, bool(hdr["robust"])), Policy(P, hdr["tie_break"]), hdr


# -- reference implementations for cross-checking ---------------------------------


def oracle_values(rows: KernelRows, grid: GridAbstraction, N: int, nbhd: NeighborhoodIndex | None = None):
    """Loop-based recursion over (stage, cell, action) with explicit neighbour sets."""
    n = grid.n_cells
    cls = grid.classes
    V = [[1.0 if cls[i] == TARGET else 0.0 for i in range(n)] for _ in range(N + 1)]
    dense = [rows.safe[a].toarray() for a in range(rows.n_actions)]
    members = [nbhd.members(j) for j in range(n)] if nbhd is not None else None
    for k in range(N - 1, -1, -1):
        nxt = V[k + 1]
        if members is not None:
            # neighbours cut off by the grid edge count as value 0
            full = len(nbhd.offsets)
            W = [min([nxt[c] for c in members[j]] + ([0.0] if len(members[j]) < full else [])) for j in range(n)]
        else:
            W = nxt
        for i in range(n):
            if cls[i] != SAFE:
                V[k][i] = nxt[i]
                continue
            best = -np.inf
            for a in range(rows.n_actions):
                q = rows.target[a, i]
                for j in range(n):
                    p = dense[a][i, j]
                    if p:
                        q += p * W[j]
                best = max(best, q)
            V[k][i] = best
    return np.array(V)


def enumerate_policies_value(rows: KernelRows, grid: GridAbstraction, N: int,
                             nbhd: NeighborhoodIndex | None = None, limit: int = 200_000) -> np.ndarray:
    """Best stage-0 value over every deterministic Markov policy, by brute force.

    There are ``A ** (N * |safe|)`` policies; all of them are evaluated (in
    vectorised batches) by their own backward pass and the pointwise maximum
    is returned. Only usable on tiny instances.
    """
    safe = grid.safe_indices
    A = rows.n_actions
    n_choices = N * safe.size
    total = A ** n_choices
    if total > limit:
        raise ValueError("instance too large for enumeration")
    P = [rows.safe[a][safe].toarray() for a in range(A)]
    T = rows.target[:, safe]
    boundary = _boundary_values(grid)
    best = np.full(grid.n_cells, -np.inf)
    it = itertools.product(range(A), repeat=n_choices)
    cols = np.arange(safe.size)
    while True:
        batch = np.array(list(itertools.islice(it, 4096)), dtype=np.int64)
        if batch.size == 0 and n_choices > 0:
            break
        C = max(len(batch), 1)
        acts = batch.reshape(C, N, safe.size)
        V = np.tile(boundary, (C, 1))
        for k in range(N - 1, -1, -1):
            W = nbhd.erode(V) if nbhd is not None else V
            Qv = np.stack([T[a] + W @ P[a].T for a in range(A)])  # (A, C, s)
            V = V.copy()
            V[:, safe] = Qv[acts[:, k, :], np.arange(C)[:, None], cols[None, :]]
        np.maximum(best, V.max(axis=0), out=best)
        if n_choices == 0:
            break
    return np.clip(best, 0.0, 1.0)
