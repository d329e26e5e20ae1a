"""Polyhedral and norm-ball set algebra.

Every set here is closed except :class:`Complement`, which is the open
complement of a closed set. Membership tests use the defining inequalities
with no tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union as _U

import numpy as np


class GeometryError(ValueError):
    pass


def _vec(x, name="vector"):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class HalfspacePolytope:
    """The set ``{x | normals @ x <= offsets}``."""

    normals: np.ndarray
    offsets: np.ndarray
    dim: int = field(default=-1)

    def __post_init__(self):
        H = np.asarray(self.normals, dtype=float)
        b = np.asarray(self.offsets, dtype=float).reshape(-1)
        dim = self.dim
        if H.size == 0:
            if dim < 0:
                raise GeometryError("dimension of an unconstrained polytope must be given")
            H = np.zeros((0, dim))
        if H.ndim == 1:
            H = H.reshape(1, -1)
        if dim < 0:
            dim = H.shape[1]
        if H.shape[1] != dim:
            raise GeometryError(f"normals have {H.shape[1]} columns, expected {dim}")
        if H.shape[0] != b.shape[0]:
            raise GeometryError("normals and offsets differ in count")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(b))):
            raise GeometryError("polytope data must be finite")
        if H.shape[0] and np.any(np.all(H == 0.0, axis=1)):
            raise GeometryError("zero normal row")
        H.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "normals", H)
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "dim", int(dim))

    @classmethod
    def from_box(cls, lo, hi) -> "HalfspacePolytope":
        lo, hi = _vec(lo), _vec(hi)
        d = lo.size
        eye = np.eye(d)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    @property
    def n_constraints(self) -> int:
        return self.normals.shape[0]

    @property
    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.normals, axis=1)

    def contains(self, x) -> bool:
        x = _vec(x)
        if x.size != self.dim:
            raise GeometryError(f"point has dim {x.size}, polytope has dim {self.dim}")
        return bool(np.all(self.normals @ x <= self.offsets))

    def contains_points(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.all(X @ self.normals.T <= self.offsets, axis=1)

    def to_dict(self) -> dict:
        return {"type": "polytope", "normals": self.normals.tolist(), "offsets": self.offsets.tolist()}


@dataclass(frozen=True, eq=False)
class Ball:
    """Closed Euclidean ball."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = _vec(self.center, "center")
        if not (math.isfinite(self.radius) and self.radius >= 0):
            raise GeometryError("ball radius must be finite and >= 0")
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))

    @classmethod
    def origin(cls, dim: int, radius: float) -> "Ball":
        return cls(np.zeros(dim), radius)

    @property
    def dim(self) -> int:
        return self.center.size

    def to_dict(self) -> dict:
        return {"type": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class HyperRect:
    """Closed axis-aligned box ``center +/- half_widths``."""

    center: np.ndarray
    half_widths: np.ndarray

    def __post_init__(self):
        c = _vec(self.center, "center")
        h = _vec(self.half_widths, "half_widths")
        if c.size != h.size:
            raise GeometryError("center and half_widths differ in length")
        if np.any(h < 0):
            raise GeometryError("half_widths must be nonnegative")
        c.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_widths", h)

    @classmethod
    def from_bounds(cls, lo, hi) -> "HyperRect":
        lo, hi = _vec(lo), _vec(hi)
        if lo.shape != hi.shape:
            raise GeometryError("box bounds have different lengths")
        if np.any(hi < lo):
            raise GeometryError("box upper bound below lower bound")
        return cls(0.5 * (lo + hi), 0.5 * (hi - lo))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_widths

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_widths

    def to_dict(self) -> dict:
        return {"type": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True, eq=False)
class Union:
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        dims = {region_dim(m) for m in members} - {None}
        if len(dims) > 1:
            raise GeometryError("union members differ in dimension")
        object.__setattr__(self, "members", members)

    def to_dict(self) -> dict:
        return {"type": "union", "members": [region_to_dict(m) for m in self.members]}


@dataclass(frozen=True, eq=False)
class Intersection:
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise GeometryError("empty intersection is the whole space; give at least one member")
        dims = {region_dim(m) for m in members} - {None}
        if len(dims) > 1:
            raise GeometryError("intersection members differ in dimension")
        object.__setattr__(self, "members", members)

    def to_dict(self) -> dict:
        return {"type": "intersection", "members": [region_to_dict(m) for m in self.members]}


@dataclass(frozen=True, eq=False)
class Complement:
    inner: object
    dim: int = -1

    def __post_init__(self):
        d = region_dim(self.inner)
        if d is None:
            d = self.dim
        object.__setattr__(self, "dim", d)

    def to_dict(self) -> dict:
        return {"type": "complement", "of": region_to_dict(self.inner)}


RegionSet = _U[HalfspacePolytope, Ball, HyperRect, Union, Intersection, Complement]


def region_dim(s) -> int | None:
    if isinstance(s, (HalfspacePolytope, Ball, HyperRect)):
        return s.dim
    if isinstance(s, Complement):
        return s.dim
    if isinstance(s, (Union, Intersection)):
        for m in s.members:
            d = region_dim(m)
            if d is not None:
                return d
        return None
    raise TypeError(f"not a region: {type(s).__name__}")


# ---------------------------------------------------------------------------
# Erosion


def pontryagin_erode_ball(p: HalfspacePolytope, r: float) -> HalfspacePolytope:
    """Return ``p ⊖ B_r``: each offset shrinks by ``||h_i|| r``."""
    if r < 0 or not math.isfinite(r):
        raise GeometryError("erosion radius must be finite and >= 0")
    return HalfspacePolytope(p.normals, p.offsets - p.row_norms * r, dim=p.dim)


def pontryagin_erode_rect(p: HalfspacePolytope, h: HyperRect) -> HalfspacePolytope:
    """Return ``p ⊖ h`` for an origin-centred box ``h``."""
    if h.dim != p.dim:
        raise GeometryError("box and polytope differ in dimension")
    if np.any(h.center != 0.0):
        raise GeometryError("box must be centred at the origin")
    support = np.abs(p.normals) @ h.half_widths
    return HalfspacePolytope(p.normals, p.offsets - support, dim=p.dim)


# ---------------------------------------------------------------------------
# Membership


def region_contains(s, x) -> bool:
    x = _vec(x, "point")
    d = region_dim(s)
    if d is not None and x.size != d:
        raise GeometryError(f"point has dim {x.size}, region has dim {d}")
    return bool(contains_points(s, x[None, :])[0])


def contains_points(s, X) -> np.ndarray:
    """Vectorised membership for the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if isinstance(s, HalfspacePolytope):
        return s.contains_points(X)
    if isinstance(s, Ball):
        diff = X - s.center
        return np.einsum("ij,ij->i", diff, diff) <= s.radius**2
    if isinstance(s, HyperRect):
        return np.all(np.abs(X - s.center) <= s.half_widths, axis=1)
    if isinstance(s, Union):
        out = np.zeros(X.shape[0], dtype=bool)
        for m in s.members:
            out |= contains_points(m, X)
        return out
    if isinstance(s, Intersection):
        out = np.ones(X.shape[0], dtype=bool)
        for m in s.members:
            out &= contains_points(m, X)
        return out
    if isinstance(s, Complement):
        return ~contains_points(s.inner, X)
    raise TypeError(f"not a region: {type(s).__name__}")


# ---------------------------------------------------------------------------
# Cell classification


def _box_box_distance(cell: HyperRect, box: HyperRect) -> float:
    gap = np.maximum(np.abs(cell.center - box.center) - cell.half_widths - box.half_widths, 0.0)
    return float(np.linalg.norm(gap))


def _box_polytope_distance(cell: HyperRect, p: HalfspacePolytope) -> float:
    # min ||x - y|| over x in cell, y in p; solved as a QP in (x, y)
    from .qp import QuadraticProgram, solve_qp

    d = cell.dim
    I = np.eye(d)
    P = np.block([[I, -I], [-I, I]])
    A_in = np.vstack(
        [
            np.hstack([I, np.zeros((d, d))]),
            np.hstack([-I, np.zeros((d, d))]),
            np.hstack([np.zeros((p.n_constraints, d)), p.normals]),
        ]
    )
    b_in = np.concatenate([cell.hi, -cell.lo, p.offsets])
    sol = solve_qp(QuadraticProgram(P, np.zeros(2 * d), A_in=A_in, b_in=b_in), tol=1e-10)
    if sol.status == "infeasible":
        return math.inf
    z = sol.z
    return float(np.linalg.norm(z[:d] - z[d:]))


def rect_fully_inside(cell: HyperRect, s, margin: float = 0.0) -> bool:
    """True iff every point of ``cell ⊕ B_margin`` lies in ``s``.

    Exact for boxes, balls and polytopes. Unions count as containing the
    cell if a single member does (sufficient, not necessary).
    """
    if margin < 0:
        raise GeometryError("margin must be >= 0")
    d = region_dim(s)
    if d is not None and cell.dim != d:
        raise GeometryError("cell and region differ in dimension")
    if isinstance(s, HalfspacePolytope):
        worst = s.normals @ cell.center + np.abs(s.normals) @ cell.half_widths + s.row_norms * margin
        return bool(np.all(worst <= s.offsets))
    if isinstance(s, Ball):
        far = np.abs(cell.center - s.center) + cell.half_widths
        return bool(np.linalg.norm(far) + margin <= s.radius)
    if isinstance(s, HyperRect):
        return bool(np.all(cell.lo - margin >= s.lo) and np.all(cell.hi + margin <= s.hi))
    if isinstance(s, Union):
        return any(rect_fully_inside(cell, m, margin) for m in s.members)
    if isinstance(s, Intersection):
        return all(rect_fully_inside(cell, m, margin) for m in s.members)
    if isinstance(s, Complement):
        return rect_disjoint(cell, s.inner, margin)
    raise TypeError(f"not a region: {type(s).__name__}")


def rect_disjoint(cell: HyperRect, s, margin: float = 0.0) -> bool:
    """True iff ``cell ⊕ B_margin`` does not meet ``s``.

    Closed sets need a strictly positive separation. For an intersection the
    test is sufficient only (disjoint from some member).
    """
    if isinstance(s, HyperRect):
        return _box_box_distance(cell, s) > margin
    if isinstance(s, Ball):
        gap = np.maximum(np.abs(cell.center - s.center) - cell.half_widths, 0.0)
        return bool(np.linalg.norm(gap) > s.radius + margin)
    if isinstance(s, HalfspacePolytope):
        # cheap certificate first: whole inflated cell beyond one facet
        lowest = s.normals @ cell.center - np.abs(s.normals) @ cell.half_widths - s.row_norms * margin
        if np.any(lowest > s.offsets):
            return True
        return _box_polytope_distance(cell, s) > margin
    if isinstance(s, Union):
        return all(rect_disjoint(cell, m, margin) for m in s.members)
    if isinstance(s, Intersection):
        return any(rect_disjoint(cell, m, margin) for m in s.members)
    if isinstance(s, Complement):
        # missing the open complement means lying inside the closed inner set
        return rect_fully_inside(cell, s.inner, margin)
    raise TypeError(f"not a region: {type(s).__name__}")


# ---------------------------------------------------------------------------
# Serialisation


def region_to_dict(s) -> dict:
    return s.to_dict()


def region_from_dict(d: dict):
    kind = d.get("type")
    if kind == "box":
        return HyperRect.from_bounds(d["lo"], d["hi"])
    if kind == "ball":
        return Ball(d["center"], float(d["radius"]))
    if kind == "polytope":
        return HalfspacePolytope(np.asarray(d["normals"], dtype=float), np.asarray(d["offsets"], dtype=float))
    if kind == "union":
        return Union(tuple(region_from_dict(m) for m in d["members"]))
    if kind == "intersection":
        return Intersection(tuple(region_from_dict(m) for m in d["members"]))
    if kind == "complement":
        return Complement(region_from_dict(d["of"]))
    raise GeometryError(f"unknown region type {kind!r}")


def polytope_from_dict(d: dict) -> HalfspacePolytope:
    if d.get("type", "polytope") == "box":
        return HalfspacePolytope.from_box(d["lo"], d["hi"])
    return HalfspacePolytope(np.asarray(d["normals"], dtype=float), np.asarray(d["offsets"], dtype=float))


def outline(s, resolution: int = 64) -> list[dict]:
    """Plot-ready outline records for primitive members of ``s``."""
    out = []
    if isinstance(s, HyperRect):
        out.append({"kind": "box", "lo": s.lo.tolist(), "hi": s.hi.tolist()})
    elif isinstance(s, Ball):
        out.append({"kind": "ball", "center": s.center.tolist(), "radius": s.radius})
    elif isinstance(s, HalfspacePolytope):
        out.append({"kind": "polytope", "normals": s.normals.tolist(), "offsets": s.offsets.tolist()})
    elif isinstance(s, (Union, Intersection)):
        for m in s.members:
            out.extend(outline(m, resolution))
    elif isinstance(s, Complement):
        for rec in outline(s.inner, resolution):
            rec = dict(rec)
            rec["complement"] = not rec.get("complement", False)
            out.append(rec)
    return out
