"""Planar polygon primitive and its metrics."""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateError

DUPLICATE_TOL = 1e-9
AREA_TOL = 1e-9


def signed_area(points: np.ndarray) -> float:
    # relative to the first vertex to avoid cancellation far from the origin
    q = points - points[0]
    x, y = q[:, 0], q[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _drop_consecutive_duplicates(points: np.ndarray, tol: float) -> np.ndarray:
    # a run of duplicates collapses onto its first member; the ring start is kept
    step = np.linalg.norm(np.diff(points, axis=0), axis=1) > tol
    pts = points[np.r_[True, step]]
    end = len(pts)
    while end > 1 and np.linalg.norm(pts[end - 1] - pts[0]) <= tol:
        end -= 1
    return pts[:end]


class Polygon2D:
    """Implicitly closed 2D polygon, normalized to counter-clockwise order.

    Consecutive vertices closer than ``1e-9`` are merged (including the
    closing pair), so a ring with a repeated first/last vertex is accepted.
    The vertex array is read-only.
    """

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.array(points, dtype=float).reshape(-1, 2)
        if len(pts) >= 2:
            pts = _drop_consecutive_duplicates(pts, DUPLICATE_TOL)
        if len(pts) < 3:
            raise DegenerateError(f"polygon needs >= 3 distinct vertices, got {len(pts)}")
        if not np.isfinite(pts).all():
            raise DegenerateError("polygon has non-finite coordinates")
        if signed_area(pts) < 0:
            pts = pts[::-1].copy()
        pts.flags.writeable = False
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    def __repr__(self) -> str:
        return f"Polygon2D(n={len(self)}, area={signed_area(self.points):.6g})"

    def __eq__(self, other):
        return (isinstance(other, Polygon2D) and self.points.shape == other.points.shape
                and bool(np.array_equal(self.points, other.points)))

    __hash__ = None

    @property
    def area(self) -> float:
        return polygon_area(self)

    @property
    def edges(self) -> np.ndarray:
        """(n, 2, 2) array of directed edges."""
        return np.stack([self.points, np.roll(self.points, -1, axis=0)], axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def transformed(self, fn) -> Polygon2D:
        """Polygon with ``fn`` applied to the (n, 2) vertex array."""
        return Polygon2D(fn(self.points))


def polygon_area(p: Polygon2D) -> float:
    a = signed_area(p.points)
    if a < AREA_TOL:
        raise DegenerateError(f"polygon area {a:.3g} below {AREA_TOL}")
    return a


def polygon_perimeter(p: Polygon2D) -> float:
    return float(np.linalg.norm(np.roll(p.points, -1, axis=0) - p.points, axis=1).sum())


def polygon_centroid(p: Polygon2D) -> np.ndarray:
    """Area centroid.

    Computed relative to the first vertex so that polygons far from the
    origin do not lose precision.
    """
    area = polygon_area(p)
    q = p.points - p.points[0]
    x, y = q[:, 0], q[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    cx = np.dot(x + xn, cross) / (6.0 * area)
    cy = np.dot(y + yn, cross) / (6.0 * area)
    return np.array([cx, cy]) + p.points[0]


def points_in_polygon(points: np.ndarray, p: Polygon2D) -> np.ndarray:
    """Even-odd containment test for an (m, 2) array of query points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    a = p.points
    b = np.roll(a, -1, axis=0)
    px, py = pts[:, :1], pts[:, 1:]
    ay, by = a[:, 1], b[:, 1]
    straddle = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = a[:, 0] + (py - ay) * (b[:, 0] - a[:, 0]) / (by - ay)
    hits = straddle & (px < xcross)
    return (hits.sum(axis=1) % 2).astype(bool)


def _orient(a, b, c):
    return ((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
            - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))


def is_simple(p: Polygon2D | np.ndarray, tol: float = 1e-12) -> bool:
    """True when no two non-adjacent edges touch or cross.

    O(n^2) in memory chunks; fine for annotation-sized rings.
    """
    pts = p.points if isinstance(p, Polygon2D) else np.asarray(p, dtype=float)
    n = len(pts)
    if n < 3:
        return False
    a = pts
    b = np.roll(pts, -1, axis=0)
    idx = np.arange(n)
    scale = max(float(np.ptp(pts, axis=0).max()), 1.0)
    eps = tol * scale * scale
    chunk = max(1, 2_000_000 // n)
    for start in range(0, n, chunk):
        i = idx[start:start + chunk, None]
        ai, bi = a[i[:, 0]][:, None, :], b[i[:, 0]][:, None, :]
        aj, bj = a[None, :, :], b[None, :, :]
        d1 = _orient(ai, bi, aj)
        d2 = _orient(ai, bi, bj)
        d3 = _orient(aj, bj, ai)
        d4 = _orient(aj, bj, bi)
        proper = (((d1 > eps) & (d2 < -eps)) | ((d1 < -eps) & (d2 > eps))) & \
                 (((d3 > eps) & (d4 < -eps)) | ((d3 < -eps) & (d4 > eps)))
        # touching: an endpoint collinear with and inside the other segment
        touch = np.zeros_like(proper)
        for d, p0, q0, r in ((d1, ai, bi, aj), (d2, ai, bi, bj), (d3, aj, bj, ai), (d4, aj, bj, bi)):
            lo = np.minimum(p0, q0) - 1e-12 * scale
            hi = np.maximum(p0, q0) + 1e-12 * scale
            within = ((r >= lo) & (r <= hi)).all(axis=-1)
            touch |= (np.abs(d) <= eps) & within
        j = idx[None, :]
        adjacent = (i == j) | ((i + 1) % n == j) | ((j + 1) % n == i)
        if ((proper | touch) & ~adjacent).any():
            return False
    # adjacent edges folding back onto each other
    prev = np.roll(pts, 1, axis=0)
    cross = _orient(prev, pts, b)
    dot = ((pts - prev) * (b - pts)).sum(axis=1)
    if ((np.abs(cross) <= eps) & (dot < 0)).any():
        return False
    return True
