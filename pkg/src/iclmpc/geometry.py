"""Halfspace-represented polytopes and the handful of set operations the
controller needs: membership, intersection, support functions, emptiness,
origin-anchored scaling and convex hulls of point clouds.

All polytopes are immutable.  Operations are plain functions so they can be
used from worker processes without shared state.
"""
from __future__ import annotations

import itertools
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "Polytope",
    "GeometryError",
    "DegenerateHullError",
    "UnsupportedDimensionError",
    "EmptyPolytopeError",
    "UnboundedError",
    "MEMBERSHIP_TOL",
    "LP_TOL",
    "contains",
    "intersect",
    "convex_hull",
    "support",
    "is_empty",
    "scale",
    "chebyshev_center",
    "vertices",
    "remove_redundant",
    "bounding_box",
    "stack",
]

MEMBERSHIP_TOL = 1e-7
LP_TOL = 1e-8
COLLINEAR_TOL = 1e-9


class GeometryError(ValueError):
    pass


class DegenerateHullError(GeometryError):
    """Point cloud does not span the ambient space."""

    def __init__(self, message: str, rank: int):
        super().__init__(message)
        self.rank = rank


class UnsupportedDimensionError(GeometryError):
    pass


class EmptyPolytopeError(GeometryError):
    pass


class UnboundedError(GeometryError):
    pass


class Polytope:
    """Convex set ``{x : H x <= h}``.

    Parameters
    ----------
    H : array_like, shape (r, n)
        Facet normals, one per row.  Zero rows are rejected.
    h : array_like, shape (r,)
        Facet offsets.
    """

    __slots__ = ("_H", "_h", "_box")

    def __init__(self, H, h):
        H = np.array(H, dtype=float, ndmin=2)
        h = np.array(h, dtype=float).reshape(-1)
        if H.ndim != 2 or H.shape[1] < 1:
            raise GeometryError("H must be a 2-D array with at least one column")
        if H.shape[0] != h.shape[0]:
            raise GeometryError(
                f"H has {H.shape[0]} rows but h has {h.shape[0]} entries"
            )
        if H.shape[0] and np.any(np.linalg.norm(H, axis=1) <= 1e-14):
            raise GeometryError("zero row in H")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise GeometryError("H and h must be finite")
        H.setflags(write=False)
        h.setflags(write=False)
        self._H = H
        self._h = h
        self._box = None

    @property
    def H(self) -> np.ndarray:
        return self._H

    @property
    def h(self) -> np.ndarray:
        return self._h

    @property
    def dim(self) -> int:
        return self._H.shape[1]

    @property
    def n_rows(self) -> int:
        return self._H.shape[0]

    @classmethod
    def from_box(cls, lower, upper) -> "Polytope":
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise GeometryError("box bounds differ in length")
        n = lower.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    def as_box(self):
        """Return ``(lower, upper)`` if this is a bounded axis-aligned box, else None."""
        if self._box is None:
            self._box = _detect_box(self._H, self._h) or False
        return self._box or None

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        return contains(self, x, tol)

    def __and__(self, other: "Polytope") -> "Polytope":
        return intersect(self, other)

    def __repr__(self) -> str:
        return f"Polytope(dim={self.dim}, rows={self.n_rows})"

    def to_dict(self) -> dict:
        return {"H": self._H.tolist(), "h": self._h.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Polytope":
        H = np.asarray(data["H"], dtype=float)
        h = np.asarray(data["h"], dtype=float)
        if H.size == 0:
            H = H.reshape(0, int(data.get("dim", 1)))
        return cls(H, h)

    def __getstate__(self):
        return (self._H, self._h)

    def __setstate__(self, state):
        H, h = state
        self._H, self._h = H, h
        self._box = None


def _detect_box(H: np.ndarray, h: np.ndarray):
    n = H.shape[1]
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    for row, off in zip(H, h):
        nz = np.flatnonzero(row)
        if nz.size != 1:
            return None
        i = nz[0]
        val = off / row[i]
        if row[i] > 0:
            upper[i] = min(upper[i], val)
        else:
            lower[i] = max(lower[i], val)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        return None
    if np.any(lower > upper):
        return None
    return lower, upper


def _scaled_tol(P: Polytope, tol: float) -> float:
    hmax = float(np.max(np.abs(P.h))) if P.n_rows else 0.0
    return tol * max(1.0, hmax)


def _check_dim(P: Polytope, x: np.ndarray) -> None:
    if x.shape[-1] != P.dim:
        raise GeometryError(f"point has dimension {x.shape[-1]}, polytope has {P.dim}")


def contains(P: Polytope, x, tol: float = MEMBERSHIP_TOL):
    """Membership test ``H x <= h + tol``.

    ``x`` may be a single point or an array of points (one per row), in which
    case a boolean array is returned.  ``tol`` is scaled by ``max(1, |h|_inf)``.
    """
    if tol < 0:
        raise GeometryError("tol must be nonnegative")
    x = np.asarray(x, dtype=float)
    _check_dim(P, x)
    slack = P.h + _scaled_tol(P, tol)
    if x.ndim == 1:
        return bool(np.all(P.H @ x <= slack))
    return np.all(x @ P.H.T <= slack, axis=1)


def intersect(P: Polytope, Q: Polytope) -> Polytope:
    if P.dim != Q.dim:
        raise GeometryError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    return Polytope(np.vstack([P.H, Q.H]), np.concatenate([P.h, Q.h]))


def scale(P: Polytope, gamma: float) -> Polytope:
    """Origin-anchored scaling ``{x : H x <= gamma h}``."""
    if not gamma > 0:
        raise GeometryError("scale factor must be positive")
    return Polytope(P.H, gamma * P.h)


def support(P: Polytope, a) -> float:
    """Support function ``max_{x in P} a.x``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    _check_dim(P, a)
    box = P.as_box()
    if box is not None:
        lo, hi = box
        return float(np.sum(np.where(a >= 0, a * hi, a * lo)))
    res = linprog(-a, A_ub=P.H, b_ub=P.h, bounds=[(None, None)] * P.dim, method="highs")
    if res.status == 2:
        raise EmptyPolytopeError("support of an empty polytope")
    if res.status == 3:
        raise UnboundedError("polytope is unbounded in the requested direction")
    if res.status != 0:
        raise GeometryError(f"support LP failed: {res.message}")
    return float(-res.fun)


def chebyshev_center(P: Polytope):
    """Center and radius of the largest inscribed ball.

    The radius is capped at 1e6 so unbounded sets still yield a point.  A
    negative radius means the set is empty (it is the largest uniform
    violation that cannot be avoided).
    """
    norms = np.linalg.norm(P.H, axis=1)
    n = P.dim
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([P.H, norms[:, None]])
    bounds = [(None, None)] * n + [(None, 1e6)]
    res = linprog(c, A_ub=A_ub, b_ub=P.h, bounds=bounds, method="highs")
    if res.status != 0:
        raise GeometryError(f"Chebyshev LP failed: {res.message}")
    return res.x[:n], float(res.x[n])


def is_empty(P: Polytope, tol: float = LP_TOL) -> bool:
    if P.n_rows == 0:
        return False
    _, radius = chebyshev_center(P)
    return radius < -tol


def bounding_box(P: Polytope):
    """Axis-aligned bounds ``(lower, upper)`` of a bounded polytope."""
    box = P.as_box()
    if box is not None:
        return box
    eye = np.eye(P.dim)
    upper = np.array([support(P, e) for e in eye])
    lower = -np.array([support(P, -e) for e in eye])
    return lower, upper


def remove_redundant(P: Polytope, tol: float = 1e-9) -> Polytope:
    """Drop rows implied by the others (one LP per row).

    Duplicate rows are merged first.  The set itself is unchanged.
    """
    if P.n_rows <= 1:
        return P
    norms = np.linalg.norm(P.H, axis=1)
    Hn = P.H / norms[:, None]
    hn = P.h / norms
    # merge rows with identical normals, keeping the tightest offset
    tightest: dict[tuple, int] = {}
    for idx, key in enumerate(map(tuple, np.round(Hn, 10))):
        if key not in tightest or hn[idx] < hn[tightest[key]]:
            tightest[key] = idx
    kept = sorted(tightest.values())
    Hn, hn = Hn[kept], hn[kept]
    if is_empty(Polytope(Hn, hn)):
        return Polytope(Hn, hn)
    active = np.ones(len(hn), dtype=bool)
    for i in range(len(hn)):
        active[i] = False
        res = linprog(
            -Hn[i], A_ub=Hn[active], b_ub=hn[active] + 0.0,
            bounds=[(None, None)] * P.dim, method="highs",
        )
        if res.status == 0 and -res.fun <= hn[i] + tol:
            continue  # row i implied by the rest
        active[i] = True
    return Polytope(Hn[active], hn[active])


def vertices(P: Polytope, tol: float = 1e-9) -> np.ndarray:
    """Vertices of a bounded polytope in one or two dimensions.

    Two-dimensional vertices are returned in counter-clockwise order.
    """
    if P.dim == 1:
        return np.array([[-support(P, [-1.0])], [support(P, [1.0])]])
    if P.dim != 2:
        raise UnsupportedDimensionError("vertex enumeration is implemented for dim <= 2")
    H, h = P.H, P.h
    pts = []
    for i, j in itertools.combinations(range(len(h)), 2):
        M = H[[i, j]]
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        if abs(det) < 1e-12 * np.linalg.norm(M[0]) * np.linalg.norm(M[1]):
            continue
        x = np.linalg.solve(M, h[[i, j]])
        if np.all(H @ x <= h + tol * max(1.0, np.abs(h).max())):
            pts.append(x)
    if not pts:
        return np.zeros((0, 2))
    pts = np.unique(np.round(np.array(pts), 12), axis=0)
    # merge near-duplicates produced by more than two rows meeting at a point
    merged = []
    for p in pts:
        if not any(np.linalg.norm(p - q) <= 1e-9 * max(1.0, np.abs(p).max()) for q in merged):
            merged.append(p)
    pts = np.array(merged)
    center = pts.mean(axis=0)
    ang = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
    return pts[np.argsort(ang)]


# --------------------------------------------------------------------------
# convex hulls


def _affine_rank(points: np.ndarray) -> int:
    centered = points - points.mean(axis=0)
    if not np.any(centered):
        return 0
    s = np.linalg.svd(centered, compute_uv=False)
    return int(np.sum(s > COLLINEAR_TOL * s[0] * max(1, points.shape[0]) ** 0.5))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _monotone_chain(points: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, points)))
    if len(pts) < 3:
        return np.array(pts)
    span = np.ptp(np.array(pts), axis=0).max()
    eps = COLLINEAR_TOL * span * span

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= eps:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def _hull_2d(points: np.ndarray) -> Polytope:
    ring = _monotone_chain(points)
    nxt = np.roll(ring, -1, axis=0)
    edge = nxt - ring
    normals = np.column_stack([edge[:, 1], -edge[:, 0]])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    offsets = np.einsum("ij,ij->i", normals, ring)
    return Polytope(normals, offsets)


def _hull_qhull(points: np.ndarray) -> Polytope:
    from scipy.spatial import ConvexHull

    hull = ConvexHull(points)
    eq = hull.equations
    normals, offsets = eq[:, :-1], -eq[:, -1]
    # qhull triangulates facets; merge coplanar copies
    key = np.round(np.column_stack([normals, offsets]), 9)
    _, idx = np.unique(key, axis=0, return_index=True)
    idx.sort()
    return Polytope(normals[idx], offsets[idx])


def convex_hull(points: Sequence[Sequence[float]] | np.ndarray) -> Polytope:
    """H-representation of the convex hull of a finite point cloud.

    Raises
    ------
    DegenerateHullError
        If the points are not full-dimensional; ``err.rank`` is the affine rank.
    UnsupportedDimensionError
        For clouds in more than four dimensions.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise GeometryError("empty point cloud")
    if pts.ndim != 2:
        raise GeometryError("points must be a 2-D array (one point per row)")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("points must be finite")
    n = pts.shape[1]
    if n > 4:
        raise UnsupportedDimensionError(f"hulls are supported up to dimension 4, got {n}")
    rank = _affine_rank(pts)
    if rank < n:
        raise DegenerateHullError(
            f"point cloud has affine rank {rank} in dimension {n}", rank
        )
    if n == 1:
        lo, hi = pts.min(), pts.max()
        return Polytope([[1.0], [-1.0]], [hi, -lo])
    if n == 2:
        return _hull_2d(pts)
    return _hull_qhull(pts)


def stack(polytopes: Iterable[Polytope]) -> Polytope:
    polys = list(polytopes)
    return Polytope(np.vstack([p.H for p in polys]), np.concatenate([p.h for p in polys]))
