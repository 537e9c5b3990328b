"""Procedural closed meshes: boxes, UV ellipsoids and the generic prostate model."""
from __future__ import annotations

import numpy as np

from ..errors import ArgumentError
from .mesh import TriMesh

# superellipsoid exponent of the generic model; < 1 is boxier than an ellipsoid
GENERIC_EXPONENT = 0.8


def box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    """Axis-aligned box, 8 vertices and 12 outward triangles."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = [[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
         [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]]
    t = [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
         [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
         [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]]
    return TriMesh(v, t)


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def uv_ellipsoid(semi_axes=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), stacks: int = 16,
                 slices: int = 32, exponent: float = 1.0) -> TriMesh:
    """Closed latitude/longitude tessellation of a (super)ellipsoid.

    ``stacks`` latitude bands between two pole vertices, ``slices``
    longitude segments. ``exponent`` applies to both angular terms;
    1.0 gives an ordinary ellipsoid.
    """
    if stacks < 2 or slices < 3:
        raise ArgumentError("need stacks >= 2 and slices >= 3")
    a, b, c = semi_axes
    lat = np.linspace(-np.pi / 2, np.pi / 2, stacks + 1)[1:-1]
    lon = np.linspace(0.0, 2 * np.pi, slices, endpoint=False)
    cl, sl = _spow(np.cos(lat), exponent), _spow(np.sin(lat), exponent)
    co, so = _spow(np.cos(lon), exponent), _spow(np.sin(lon), exponent)
    ring = np.stack([a * np.outer(cl, co), b * np.outer(cl, so),
                     c * np.repeat(sl[:, None], slices, axis=1)], axis=-1).reshape(-1, 3)
    south, north = [0.0, 0.0, -c], [0.0, 0.0, c]
    verts = np.vstack([[south], ring, [north]]) + np.asarray(center, dtype=float)

    n_rings = stacks - 1
    idx = 1 + np.arange(n_rings * slices).reshape(n_rings, slices)
    nxt = np.roll(idx, -1, axis=1)
    tris = [np.stack([np.zeros(slices, dtype=int), nxt[0], idx[0]], axis=1)]
    for r in range(n_rings - 1):
        lo, lo_n, hi, hi_n = idx[r], nxt[r], idx[r + 1], nxt[r + 1]
        tris.append(np.stack([lo, lo_n, hi_n], axis=1))
        tris.append(np.stack([lo, hi_n, hi], axis=1))
    top = len(verts) - 1
    tris.append(np.stack([idx[-1], nxt[-1], np.full(slices, top)], axis=1))
    return TriMesh(verts, np.concatenate(tris))


def generic_prostate_model(width_mm: float, height_mm: float, depth_mm: float,
                           tessellation: tuple[int, int] = (32, 64)) -> TriMesh:
    """Superellipsoid stand-in for an archetypal prostate.

    The unit-extent shape is scaled anisotropically so the bounding box is
    exactly ``width x height x depth`` along x (left-right), y
    (dorsal-ventral) and z (apex-base), centred on the origin.
    """
    stacks, slices = tessellation
    if min(width_mm, height_mm, depth_mm) <= 0:
        raise ArgumentError("model dimensions must be positive")
    if stacks < 8 or slices < 8:
        raise ArgumentError("tessellation needs stacks >= 8 and slices >= 8")
    m = uv_ellipsoid((0.5, 0.5, 0.5), stacks=stacks, slices=slices, exponent=GENERIC_EXPONENT)
    v = np.array(m.vertices)
    # coarse tessellations can miss the equator/meridian extremes; pin the box exactly
    lo, hi = v.min(axis=0), v.max(axis=0)
    v = (v - (lo + hi) / 2) / (hi - lo) * np.array([width_mm, height_mm, depth_mm])
    return TriMesh(v, m.triangles)
