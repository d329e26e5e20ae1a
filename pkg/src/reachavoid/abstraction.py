"""Grid abstraction of the stochastic subspace and Monte-Carlo transition kernels.

Cells are axis-aligned hypercubes of edge ``zeta`` tiling the bounding box of
the safe set. A cell is *safe* when it lies inside the safe set eroded by the
tube radius ``r`` and is not a *target* cell (inside the eroded target set).

Kernels are estimated by closed-loop simulation. When the stochastic states do
not feed back into the dynamics, trajectories sampled from the origin are
reused for every cell by translation; otherwise every cell centre is
simulated directly. In both modes a sample is judged on its fine path with
first-hit semantics: entering a target cell absorbs it as success, leaving
the safe cells (or the grid) absorbs it as failure.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import HyperRect, rect_fully_inside, region_contains
from .lti import STREAM_KERNEL, derive_rng

UNSAFE, SAFE, TARGET = 0, 1, 2
TRANSLATION = "translation-invariant"
PER_STATE = "per-state"


class AbstractionError(ValueError):
    pass


@dataclass(eq=False)
class GridAbstraction:
    zeta: float
    lo: np.ndarray
    shape: tuple
    classes: np.ndarray
    r: float
    initial_index: int | None = None

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def bounds(self) -> HyperRect:
        hi = self.lo + self.zeta * np.asarray(self.shape)
        return HyperRect.from_bounds(self.lo, hi)

    @property
    def safe_indices(self) -> np.ndarray:
        return np.flatnonzero(self.classes == SAFE)

    @property
    def target_indices(self) -> np.ndarray:
        return np.flatnonzero(self.classes == TARGET)

    @property
    def unsafe_mask(self) -> np.ndarray:
        return self.classes == UNSAFE

    def multi_index(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def flat_index(self, multi) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.moveaxis(np.asarray(multi), -1, 0)), self.shape)

    def centers(self, flat=None) -> np.ndarray:
        idx = self.multi_index(np.arange(self.n_cells) if flat is None else flat)
        return self.lo + (idx + 0.5) * self.zeta

    def cell(self, flat: int) -> HyperRect:
        return HyperRect(self.centers(flat), np.full(self.dim, 0.5 * self.zeta))

    def locate(self, points) -> np.ndarray:
        """Flat cell index for each point, -1 outside the grid.

        A point on a face shared by two cells belongs to the lower-index cell.
        """
        P = np.atleast_2d(np.asarray(points, dtype=float))
        u = (P - self.lo) / self.zeta
        idx = np.ceil(u).astype(np.int64) - 1
        shape = np.asarray(self.shape)
        inside = np.all((u >= 0) & (u <= shape), axis=-1)
        idx = np.clip(idx, 0, shape - 1)
        flat = np.ravel_multi_index(tuple(idx.T), self.shape)
        return np.where(inside, flat, -1)

    def class_of(self, points) -> np.ndarray:
        flat = self.locate(points)
        return np.where(flat >= 0, self.classes[np.maximum(flat, 0)], UNSAFE)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"zeta": self.zeta, "lo": self.lo.tolist(), "shape": list(self.shape),
                             "r": self.r}).encode())
        h.update(self.classes.astype(np.int8).tobytes())
        return h.hexdigest()


def build_grid(safe_set, target_set, bounds: HyperRect, zeta: float, r: float, x0=None) -> GridAbstraction:
    """Tile ``bounds`` with cells of edge ``zeta`` and classify each cell."""
    if zeta <= 0:
        raise AbstractionError("cell edge must be positive")
    if r < 0:
        raise AbstractionError("tube radius must be nonnegative")
    lo, hi = bounds.lo, bounds.hi
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise AbstractionError("bounding box must be finite")
    counts = np.maximum(np.ceil((hi - lo) / zeta - 1e-9).astype(int), 1)
    shape = tuple(int(c) for c in counts)
    grid = GridAbstraction(float(zeta), lo.copy(), shape, np.zeros(int(np.prod(shape)), dtype=np.int8), float(r))
    half = np.full(grid.dim, 0.5 * zeta)
    for i, c in enumerate(grid.centers()):
        cell = HyperRect(c, half)
        if target_set is not None and rect_fully_inside(cell, target_set, r):
            grid.classes[i] = TARGET
        elif rect_fully_inside(cell, safe_set, r):
            grid.classes[i] = SAFE
    if x0 is not None:
        p = np.asarray(x0, dtype=float)[: grid.dim]
        idx = int(grid.locate(p)[0])
        if idx < 0:
            raise AbstractionError("initial state lies outside the grid")
        grid.initial_index = idx
    return grid


def neighborhood_offsets(dim: int, zeta: float, r: float) -> np.ndarray:
    """Lattice offsets ``o`` with centre ``c_j + o*zeta`` inside ``H_j + H + B_r``.

    ``H_j + H`` is the box of half-width ``zeta`` around ``c_j``; a centre is
    included when its Euclidean distance to that box is at most ``r``.
    """
    reach = int(math.floor(r / zeta + 1e-12)) + 1
    out = []
    for o in itertools.product(range(-reach, reach + 1), repeat=dim):
        gap = np.maximum(np.abs(np.asarray(o, dtype=float)) * zeta - zeta, 0.0)
        if math.sqrt(float(np.sum(gap**2))) <= r * (1 + 1e-12) + 1e-15:
            out.append(o)
    return np.asarray(out, dtype=np.int64).reshape(-1, dim)


@dataclass(eq=False)
class NeighborhoodIndex:
    offsets: np.ndarray
    shape: tuple

    def members(self, j: int) -> np.ndarray:
        """Flat indices in the neighbourhood of cell ``j`` (clipped to the grid)."""
        base = np.asarray(np.unravel_index(j, self.shape))
        idx = base + self.offsets
        ok = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)
        return np.sort(np.ravel_multi_index(tuple(idx[ok].T), self.shape))

    def erode(self, values: np.ndarray, outside: float = 0.0) -> np.ndarray:
        """``W(j) = min over the neighbourhood of values``, with ``outside`` off-grid.

        Leading axes of ``values`` are treated as a batch.
        """
        values = np.asarray(values)
        lead = values.shape[:-1]
        V = values.reshape(lead + tuple(self.shape))
        pad = int(np.max(np.abs(self.offsets), initial=0))
        widths = [(0, 0)] * len(lead) + [(pad, pad)] * len(self.shape)
        P = np.pad(V, widths, constant_values=outside)
        W = np.full(V.shape, np.inf)
        for o in self.offsets:
            sl = (Ellipsis,) + tuple(slice(pad + k, pad + k + s) for k, s in zip(o, self.shape))
            np.minimum(W, P[sl], out=W)
        return W.reshape(values.shape)


def build_neighborhoods(grid: GridAbstraction, r: float) -> NeighborhoodIndex:
    return NeighborhoodIndex(neighborhood_offsets(grid.dim, grid.zeta, r), grid.shape)


def lattice_offsets(displacements, zeta: float) -> np.ndarray:
    """Cell offset of ``c + p`` relative to the cell of centre ``c``."""
    return np.ceil(np.asarray(displacements) / zeta + 0.5).astype(np.int64) - 1


@dataclass(eq=False)
class SampleSet:
    """Closed-loop samples for every action, stored relative to their start.

    ``runs`` holds, per sample, the sequence of distinct consecutive cell
    offsets visited by the fine path, padded by repeating the last entry;
    ``run_start`` is the fine-step index at which each run begins.
    ``nodes`` are displacements at the inner-step boundaries.
    """

    runs: np.ndarray
    run_start: np.ndarray
    nodes: np.ndarray
    end: np.ndarray
    infeasible: np.ndarray
    substeps: int

    @property
    def n_actions(self) -> int:
        return self.runs.shape[0]

    @property
    def n_samples(self) -> int:
        return self.runs.shape[1]


def compress_path(offsets: np.ndarray):
    """Run-length encode a ``(T, d)`` offset sequence; returns (values, starts)."""
    change = np.ones(len(offsets), dtype=bool)
    change[1:] = np.any(offsets[1:] != offsets[:-1], axis=1)
    starts = np.flatnonzero(change)
    return offsets[starts], starts


def pack_samples(paths: list[list[np.ndarray]], infeasible, zeta: float, substeps: int,
                 fail_at: list[list[int]] | None = None) -> SampleSet:
    """Pack fine displacement paths (``paths[a][s]`` of shape ``(T+1, d)``).

    A sample with ``fail_at`` set is truncated there; an extra run pointing
    off the grid marks the failure.
    """
    A = len(paths)
    K = len(paths[0])
    runs, starts, nodes, ends = [], [], [], []
    maxlen = 1
    for a in range(A):
        for s in range(K):
            p = paths[a][s]
            off = lattice_offsets(p, zeta)
            vals, st = compress_path(off)
            runs.append(vals)
            starts.append(st)
            maxlen = max(maxlen, len(vals))
            nodes.append(p[::substeps])
            ends.append(off[-1])
    d = paths[0][0].shape[1]
    n_nodes = max(len(x) for x in nodes)
    R = np.zeros((A * K, maxlen, d), dtype=np.int64)
    S = np.full((A * K, maxlen), np.iinfo(np.int64).max, dtype=np.int64)
    Nd = np.zeros((A * K, n_nodes, d))
    for i, (v, st, nd) in enumerate(zip(runs, starts, nodes)):
        R[i, : len(v)] = v
        R[i, len(v):] = v[-1]
        S[i, : len(st)] = st
        Nd[i, : len(nd)] = nd
        Nd[i, len(nd):] = nd[-1]
    return SampleSet(R.reshape(A, K, maxlen, d), S.reshape(A, K, maxlen), Nd.reshape(A, K, n_nodes, d),
                     np.asarray(ends).reshape(A, K, d), np.asarray(infeasible, dtype=bool).reshape(A, K),
                     substeps)


@dataclass(eq=False)
class KernelRows:
    """Transition rows over the grid, one sparse block per action.

    For cell ``i`` and action ``a``: ``target[a, i]`` and ``unsafe[a, i]`` are
    the absorption probabilities and ``safe[a][i, j]`` the mass ending in safe
    cell ``j``. Rows are populated for safe cells only. ``counts`` holds the
    same information as integer sample counts.
    """

    target: np.ndarray
    unsafe: np.ndarray
    safe: list
    n_samples: int
    cost: np.ndarray | None = None
    target_counts: np.ndarray | None = None

    @property
    def n_actions(self) -> int:
        return self.target.shape[0]

    def row(self, i: int, a: int) -> dict:
        m = self.safe[a].getrow(i)
        cells = {int(j): float(p) for j, p in zip(m.indices, m.data)}
        return {"target": float(self.target[a, i]), "unsafe": float(self.unsafe[a, i]), "cells": cells}

    def row_sums(self) -> np.ndarray:
        return np.stack([self.target[a] + self.unsafe[a] + np.asarray(self.safe[a].sum(axis=1)).ravel()
                         for a in range(self.n_actions)])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.target, self.unsafe):
            h.update(np.ascontiguousarray(arr).tobytes())
        for m in self.safe:
            m = m.tocsr()
            m.sort_indices()
            for arr in (m.indptr, m.indices, m.data):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _padded_classes(grid: GridAbstraction, pad: int) -> np.ndarray:
    return np.pad(grid.classes.reshape(grid.shape), pad, constant_values=UNSAFE)


def _outcomes(grid: GridAbstraction, cells: np.ndarray, runs: np.ndarray, starts: np.ndarray,
              infeasible: np.ndarray, padded: np.ndarray, pad: int):
    """First-hit outcome for each (cell, sample): class hit, fine step of the hit, end cell."""
    base = grid.multi_index(cells)
    idx = base[:, None, None, :] + runs[None] + pad
    cls = padded[tuple(np.moveaxis(idx, -1, 0))]
    absorbed = cls != SAFE
    hit = absorbed.any(axis=-1)
    first = absorbed.argmax(axis=-1)
    hit_class = np.take_along_axis(cls, first[..., None], axis=-1)[..., 0]
    hit_class = np.where(hit, hit_class, SAFE)
    hit_class = np.where(infeasible[None, :], UNSAFE, hit_class)
    hit_step = np.where(hit, np.take_along_axis(np.broadcast_to(starts, cls.shape), first[..., None],
                                                axis=-1)[..., 0], np.iinfo(np.int64).max)
    hit_step = np.where(infeasible[None, :], 0, hit_step)
    end_multi = base[:, None, :] + runs[None, :, -1, :]
    return hit_class, hit_step, end_multi


def rows_from_samples(grid: GridAbstraction, samples: SampleSet, cost_fn=None, delta_t: float | None = None,
                      chunk: int = 256) -> KernelRows:
    """Shift the stored samples to every safe cell and bin the outcomes."""
    A, K = samples.n_actions, samples.n_samples
    n = grid.n_cells
    safe = grid.safe_indices
    pad = int(np.max(np.abs(samples.runs), initial=0)) + 1
    padded = _padded_classes(grid, pad)
    target = np.zeros((A, n))
    unsafe = np.zeros((A, n))
    tcount = np.zeros((A, n), dtype=np.int64)
    cost = np.zeros((A, n)) if cost_fn is not None else None
    mats = []
    centers = grid.centers()
    for a in range(A):
        rows, cols, vals = [], [], []
        for s0 in range(0, safe.size, chunk):
            cells = safe[s0:s0 + chunk]
            hit_class, hit_step, end_multi = _outcomes(grid, cells, samples.runs[a], samples.run_start[a],
                                                       samples.infeasible[a], padded, pad)
            nt = np.sum(hit_class == TARGET, axis=1)
            nu = np.sum(hit_class == UNSAFE, axis=1)
            target[a, cells] = nt / K
            unsafe[a, cells] = nu / K
            tcount[a, cells] = nt
            stay = hit_class == SAFE
            ci, si = np.nonzero(stay)
            ends = grid.flat_index(end_multi[ci, si])
            key = cells[ci].astype(np.int64) * n + ends
            uniq, cnt = np.unique(key, return_counts=True)
            rows.append(uniq // n)
            cols.append(uniq % n)
            vals.append(cnt / K)
            if cost_fn is not None:
                pts = centers[cells][:, None, None, :] + samples.nodes[a][None, :, :-1, :]
                node_step = np.arange(samples.nodes.shape[2] - 1) * samples.substeps
                live = node_step[None, None, :] < hit_step[..., None]
                g = np.where(live, cost_fn(pts), 0.0)
                cost[a, cells] = g.sum(axis=(1, 2)) * delta_t / K
        r_ = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        c_ = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        v_ = np.concatenate(vals) if vals else np.zeros(0)
        mats.append(sp.csr_matrix((v_, (r_, c_)), shape=(n, n)))
    return KernelRows(target, unsafe, mats, K, cost, tcount)


@dataclass(eq=False)
class TransitionModel:
    mode: str
    samples: SampleSet | None = None
    rows: KernelRows | None = None
    header: dict = field(default_factory=dict)

    def kernel(self, grid: GridAbstraction, cost_fn=None, delta_t=None) -> KernelRows:
        if self.mode == TRANSLATION:
            return rows_from_samples(grid, self.samples, cost_fn, delta_t)
        return self.rows


def row_for(model: TransitionModel, grid: GridAbstraction, i: int, a: int) -> dict:
    """Probability row for safe cell ``i`` under action ``a``."""
    if grid.classes[i] != SAFE:
        raise AbstractionError("rows exist for safe cells only")
    if model.mode == TRANSLATION:
        one = GridAbstraction(grid.zeta, grid.lo, grid.shape, grid.classes, grid.r)
        K = model.samples.n_samples
        pad = int(np.max(np.abs(model.samples.runs), initial=0)) + 1
        padded = _padded_classes(one, pad)
        hit_class, _, end_multi = _outcomes(one, np.array([i]), model.samples.runs[a],
                                            model.samples.run_start[a], model.samples.infeasible[a], padded, pad)
        cells = {}
        for s in np.flatnonzero(hit_class[0] == SAFE):
            j = int(grid.flat_index(end_multi[0, s]))
            cells[j] = cells.get(j, 0) + 1
        return {"target": float(np.sum(hit_class[0] == TARGET)) / K,
                "unsafe": float(np.sum(hit_class[0] == UNSAFE)) / K,
                "cells": {j: c / K for j, c in sorted(cells.items())}}
    return model.rows.row(i, a)


def estimate_kernel(grid: GridAbstraction, runner, n_actions: int, K: int, root: int, n_s: int,
                    mode: str = TRANSLATION, cost_fn=None, delta_t=None, progress=None) -> TransitionModel:
    """Monte-Carlo kernel estimation.

    ``runner.run(x0, a, rng, center)`` simulates one outer step and returns an
    object with ``states`` (fine path) and ``infeasible``. Sample ``s`` of
    action ``a`` uses the stream ``(root, KERNEL, a, s)`` in both modes, so
    per-state rows can be checked against translated ones exactly.
    """
    n = runner.cfg.system.n
    zeta = grid.zeta
    S = runner.stepper.substeps
    J = runner.cfg.horizon
    infeasible_events = 0
    if mode == TRANSLATION:
        paths = []
        infeasible = np.zeros((n_actions, K), dtype=bool)
        for a in range(n_actions):
            row = []
            for s in range(K):
                rng = derive_rng(root, STREAM_KERNEL, a, s)
                res = runner.run(np.zeros(n), a, rng, center=np.zeros(n))
                row.append(full_path(res.states[:, :n_s], J * S + 1))
                infeasible[a, s] = res.infeasible
                infeasible_events += int(res.infeasible)
            paths.append(row)
            if progress:
                progress(a + 1, n_actions)
        samples = pack_samples(paths, infeasible, zeta, S)
        return TransitionModel(TRANSLATION, samples=samples,
                               header={"infeasible_samples": infeasible_events, "K": K, "actions": n_actions})
    # per-state: simulate every safe centre directly
    safe = grid.safe_indices
    nc = grid.n_cells
    centers = grid.centers()
    target = np.zeros((n_actions, nc))
    unsafe = np.zeros((n_actions, nc))
    tcount = np.zeros((n_actions, nc), dtype=np.int64)
    cost = np.zeros((n_actions, nc)) if cost_fn is not None else None
    mats = []
    for a in range(n_actions):
        counts = {}
        for i in safe:
            x0 = np.zeros(n)
            x0[:n_s] = centers[i]
            nt = nu = 0
            acc = 0.0
            for s in range(K):
                rng = derive_rng(root, STREAM_KERNEL, a, s)
                res = runner.run(x0, a, rng, center=x0)
                if res.infeasible:
                    infeasible_events += 1
                    nu += 1
                    continue
                P = res.states[:, :n_s]
                cls = grid.class_of(P)
                bad = np.flatnonzero(cls != SAFE)
                if bad.size:
                    if cls[bad[0]] == TARGET:
                        nt += 1
                    else:
                        nu += 1
                    stop = bad[0]
                else:
                    j = int(grid.locate(P[-1])[0])
                    counts[(i, j)] = counts.get((i, j), 0) + 1
                    stop = len(P)
                if cost_fn is not None:
                    node = np.arange(0, J * S, S)
                    node = node[node < stop]
                    acc += float(np.sum(cost_fn(P[node]))) * delta_t
            target[a, i] = nt / K
            unsafe[a, i] = nu / K
            tcount[a, i] = nt
            if cost is not None:
                cost[a, i] = acc / K
        if counts:
            keys = sorted(counts)
            r_ = np.array([k[0] for k in keys])
            c_ = np.array([k[1] for k in keys])
            v_ = np.array([counts[k] / K for k in keys])
        else:
            r_ = c_ = np.zeros(0, dtype=np.int64)
            v_ = np.zeros(0)
        mats.append(sp.csr_matrix((v_, (r_, c_)), shape=(nc, nc)))
        if progress:
            progress(a + 1, n_actions)
    rows = KernelRows(target, unsafe, mats, K, cost, tcount)
    return TransitionModel(PER_STATE, rows=rows,
                           header={"infeasible_samples": infeasible_events, "K": K, "actions": n_actions})


def full_path(P: np.ndarray, length: int) -> np.ndarray:
    """Pad a truncated path; infeasible samples are absorbed as failures anyway."""
    if len(P) == length:
        return P
    out = np.empty((length, P.shape[1]))
    out[: len(P)] = P
    out[len(P):] = P[-1]
    return out


def clopper_pearson(k, n, level: float = 0.99, side: str = "two"):
    """Exact binomial interval; ``side='lower'`` gives a one-sided lower bound."""
    from scipy.stats import beta

    k = np.asarray(k, dtype=float)
    if side == "lower":
        a = 1 - level
        lo = np.where(k > 0, beta.ppf(a, k, n - k + 1), 0.0)
        return lo, np.ones_like(lo)
    if side == "upper":
        a = 1 - level
        hi = np.where(k < n, beta.ppf(1 - a, k + 1, n - k), 1.0)
        return np.zeros_like(hi), hi
    a = (1 - level) / 2
    lo = np.where(k > 0, beta.ppf(a, k, n - k + 1), 0.0)
    hi = np.where(k < n, beta.ppf(1 - a, k + 1, n - k), 1.0)
    return lo, hi


def save_model(path, model: TransitionModel, header: dict) -> None:
    if model.mode != TRANSLATION:
        raise AbstractionError("only translation-invariant sample sets are cached")
    s = model.samples
    hdr = dict(header)
    hdr["mode"] = model.mode
    hdr["substeps"] = s.substeps
    hdr.update(model.header)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(hdr, sort_keys=True).encode(), dtype=np.uint8),
                 runs=s.runs, run_start=s.run_start, nodes=s.nodes, end=s.end, infeasible=s.infeasible)


def load_model(path, expect: dict | None = None) -> TransitionModel | None:
    """Load a cached sample set; None when its header disagrees with ``expect``."""
    with np.load(path) as z:
        hdr = json.loads(bytes(z["header"]).decode())
        if expect is not None and any(hdr.get(k) != v for k, v in expect.items()):
            return None
        s = SampleSet(z["runs"], z["run_start"], z["nodes"], z["end"], z["infeasible"], int(hdr["substeps"]))
    extra = {k: hdr[k] for k in ("infeasible_samples", "K", "actions") if k in hdr}
    return TransitionModel(TRANSLATION, samples=s, header=extra)


def dense_containment_check(grid: GridAbstraction, region, flat: int, margin: float, n: int, rng) -> bool:
    """Dense random check that a cell inflated by ``margin`` lies inside ``region``."""
    c = grid.centers(flat)
    X = c + rng.uniform(-0.5 * grid.zeta, 0.5 * grid.zeta, (n, grid.dim))
    if margin > 0:
        d = rng.standard_normal((n, grid.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        X = X + d * margin * rng.uniform(0, 1, (n, 1)) ** (1 / grid.dim)
    return all(region_contains(region, x) for x in X)
