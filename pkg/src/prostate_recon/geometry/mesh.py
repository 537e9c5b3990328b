"""Indexed triangle meshes."""
from __future__ import annotations

import numpy as np

from ..errors import EmptyMeshError, FormatError, OpenMeshError
from .frame import AABB, AffineTransform3D

DEGENERATE_AREA_TOL = 1e-9
WELD_TOL = 1e-6


class TriMesh:
    """Triangle surface mesh in millimetres.

    Counter-clockwise triangles (seen from outside) give outward normals.
    Arrays are stored read-only; all operations return new meshes.
    """

    __slots__ = ("vertices", "triangles")

    def __init__(self, vertices, triangles):
        v = np.array(vertices, dtype=float).reshape(-1, 3)
        t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise FormatError("triangle index out of range")
        v.flags.writeable = False
        t.flags.writeable = False
        self.vertices = v
        self.triangles = t

    def __repr__(self) -> str:
        return f"TriMesh(vertices={len(self.vertices)}, triangles={len(self.triangles)})"

    def __eq__(self, other):
        return (isinstance(other, TriMesh) and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.triangles, other.triangles))

    __hash__ = None

    @property
    def closed(self) -> bool:
        return is_closed(self)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def flipped(self) -> TriMesh:
        return TriMesh(self.vertices, self.triangles[:, ::-1])


def clean_mesh(vertices, triangles, weld_tol: float | None = None) -> TriMesh:
    """Optionally weld vertices, then drop degenerate triangles and unused vertices."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if weld_tol:
        keys = np.round(v / weld_tol).astype(np.int64)
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        # keep representatives in order of first appearance for stable output
        order = np.argsort(first)
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        v = v[first[order]]
        t = rank[inverse.reshape(-1)][t]
    repeated = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
    t = t[~repeated]
    if len(t):
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        t = t[area > DEGENERATE_AREA_TOL]
    if not len(t):
        raise EmptyMeshError("mesh has no non-degenerate triangles")
    used = np.unique(t)
    remap = np.full(len(v), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(v[used], remap[t])


def _directed_edges(m: TriMesh) -> np.ndarray:
    t = m.triangles
    return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])


def is_closed(m: TriMesh) -> bool:
    """Every edge is shared by exactly two triangles with opposite orientation."""
    if not len(m.triangles):
        return False
    e = _directed_edges(m)
    n = len(m.vertices)
    fwd = e[:, 0] * n + e[:, 1]
    rev = e[:, 1] * n + e[:, 0]
    uniq, counts = np.unique(fwd, return_counts=True)
    if (counts != 1).any():
        return False
    return bool(np.isin(rev, uniq, assume_unique=False).all())


def mesh_volume(m: TriMesh) -> float:
    """Signed enclosed volume via the divergence theorem (positive if outward)."""
    if not is_closed(m):
        raise OpenMeshError("volume requires a closed, consistently oriented mesh")
    # origin shift keeps the sum well conditioned for off-centre meshes
    v = m.vertices - m.vertices.mean(axis=0)
    a, b, c = v[m.triangles[:, 0]], v[m.triangles[:, 1]], v[m.triangles[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def bounding_box(m: TriMesh) -> AABB:
    if not len(m.vertices):
        raise EmptyMeshError("empty mesh has no bounding box")
    return AABB(m.vertices.min(axis=0), m.vertices.max(axis=0))


def apply_transform(m: TriMesh, t: AffineTransform3D) -> TriMesh:
    """Map vertices through ``t``; mirrored transforms flip winding to stay outward."""
    t.check_invertible()
    tris = m.triangles[:, ::-1] if t.determinant < 0 else m.triangles
    return TriMesh(t.apply(m.vertices), tris)


def concatenate(meshes) -> TriMesh:
    meshes = list(meshes)
    if not meshes:
        raise EmptyMeshError("nothing to concatenate")
    offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
    return TriMesh(np.concatenate([m.vertices for m in meshes]),
                   np.concatenate([m.triangles + o for m, o in zip(meshes, offsets)]))
