"""Volumes from registered annotations: convex hull, Gaussian splatter, linear extrusion.

All reconstructors take :class:`~prostate_recon.registration.RegistrationResult`
lists and return closed, outward-oriented meshes. Per-class outputs are
plain concatenations of per-ROI pieces (no boolean union).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import (ArgumentError, DegenerateError, InsufficientPointsError,
                     SelfIntersectionError, UnknownPolygonError)
from .geometry import Polygon2D, TriMesh, concatenate, is_simple, mesh_volume, uv_ellipsoid
from .geometry.meshio import write_obj
from .registration import PlanarPolygon3D, RegistrationResult, Similarity2D, _safe
from .slicing import ReferenceModel

CONVEX_HULL = "ConvexHull"
GAUSSIAN_SPLATTER = "GaussianSplatter"
LINEAR_EXTRUSION = "LinearExtrusion"
METHODS = (CONVEX_HULL, GAUSSIAN_SPLATTER, LINEAR_EXTRUSION)

HULL_LABEL = "ALL"
COPLANAR_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class ReconstructionMesh:
    class_label: str
    mesh: TriMesh
    method: str
    provenance: tuple[str, ...]

    @property
    def volume(self) -> float:
        return mesh_volume(self.mesh)


@dataclass(frozen=True)
class SplatterConfig:
    radius_factor: float = 2.0
    min_normal_sigma_mm: float | None = None  # None: half the source slab thickness
    tessellation: tuple[int, int] = (16, 32)

    def __post_init__(self):
        if not self.radius_factor > 0:
            raise ArgumentError("radius_factor must be positive")
        if self.min_normal_sigma_mm is not None and not self.min_normal_sigma_mm > 0:
            raise ArgumentError("min_normal_sigma_mm must be positive")
        if self.tessellation[0] < 2 or self.tessellation[1] < 3:
            raise ArgumentError("tessellation needs stacks >= 2 and slices >= 3")


def roi_id(res: RegistrationResult, k: int) -> str:
    """Stable identifier of the ``k``-th ROI of a registered slide."""
    return f"{res.polygon_name}/{k}:{res.registered_rois[k][0]}"


def _rois(results: Sequence[RegistrationResult]):
    for res in results:
        for k, (label, poly) in enumerate(res.registered_rois):
            yield res, k, label, poly


# ---------------------------------------------------------------------------
# convex hull


def _hull_mesh(points: np.ndarray) -> TriMesh:
    hull = ConvexHull(points)
    tris = hull.simplices.copy()
    # qhull does not orient simplices; flip those facing against the facet normal
    a, b, c = (points[tris[:, k]] for k in range(3))
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), hull.equations[:, :3]) < 0
    tris[flip] = tris[flip][:, ::-1]
    keep = np.unique(tris)
    remap = np.full(len(points), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    return TriMesh(points[keep], remap[tris])


def hull_of_points(points, thickness: float | None = None) -> TriMesh:
    """Outward triangulated convex hull of a 3D point cloud.

    Point sets that are coplanar within 1e-6 mm are first extruded
    symmetrically along their plane normal by ``thickness``.
    """
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 3), axis=0)
    if len(pts) >= 3:
        centred = pts - pts.mean(axis=0)
        _, sv, vt = np.linalg.svd(centred, full_matrices=False)
        normal = vt[-1]
        flat = np.abs(centred @ normal).max() <= COPLANAR_TOL
        # rank < 2 means collinear: nothing to extrude into a solid
        if flat and sv[1] <= COPLANAR_TOL:
            raise InsufficientPointsError("collinear points have no hull")
    else:
        flat = False
    if len(pts) < 3 or (flat and thickness is None):
        raise InsufficientPointsError(f"need 4 non-coplanar points, got {len(pts)} "
                                      "with no slab thickness to extrude")
    if flat:
        if not thickness > 0:
            raise InsufficientPointsError("extrusion thickness must be positive")
        half = 0.5 * thickness * normal
        pts = np.vstack([pts - half, pts + half])
    try:
        return _hull_mesh(pts)
    except QhullError as exc:
        raise InsufficientPointsError(f"hull failed: {exc}".splitlines()[0]) from None


def convex_hull(results: Sequence[RegistrationResult]) -> ReconstructionMesh:
    """One hull around every registered ROI point, all class labels merged."""
    pts, ids, thick = [], [], []
    for res, k, _, poly in _rois(results):
        pts.append(poly.points3d)
        ids.append(roi_id(res, k))
        thick.append(res.thickness_mm)
    if not pts:
        raise InsufficientPointsError("no registered ROI points")
    mesh = hull_of_points(np.vstack(pts), max(thick))
    return ReconstructionMesh(HULL_LABEL, mesh, CONVEX_HULL, tuple(ids))


# ---------------------------------------------------------------------------
# Gaussian splatter


def splat_parameters(poly: PlanarPolygon3D, thickness: float,
                     cfg: SplatterConfig = SplatterConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Centre and world-axis semi-axes of one ROI's ellipsoid."""
    pts = poly.points3d
    if len(pts) < 3:
        raise InsufficientPointsError("splatter needs at least 3 ROI points")
    mean = pts.mean(axis=0)
    sigma = pts.std(axis=0)
    # the slice plane is axis-aligned in the reference frame; floor its normal axis
    axis = int(np.argmax(np.abs(poly.frame.normal)))
    floor = cfg.min_normal_sigma_mm if cfg.min_normal_sigma_mm is not None else 0.5 * thickness
    sigma[axis] = max(sigma[axis], floor)
    if not (sigma > 0).all():
        raise DegenerateError("ROI has zero spread along an in-plane axis")
    return mean, cfg.radius_factor * sigma


def gaussian_splatter(results: Sequence[RegistrationResult],
                      cfg: SplatterConfig = SplatterConfig()) -> list[ReconstructionMesh]:
    """One ellipsoid per ROI, concatenated into one mesh per class label."""
    groups: dict[str, tuple[list, list]] = {}
    for res, k, label, poly in _rois(results):
        centre, semi = splat_parameters(poly, res.thickness_mm, cfg)
        mesh = uv_ellipsoid(semi, centre, *cfg.tessellation)
        meshes, ids = groups.setdefault(label, ([], []))
        meshes.append(mesh)
        ids.append(roi_id(res, k))
    return [ReconstructionMesh(label, concatenate(groups[label][0]), GAUSSIAN_SPLATTER,
                               tuple(groups[label][1])) for label in sorted(groups)]


# ---------------------------------------------------------------------------
# linear extrusion


def _cross2(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _in_triangle(p, a, b, c) -> bool:
    # closed triangle test for a CCW triangle
    return _cross2(a, b, p) >= 0 and _cross2(b, c, p) >= 0 and _cross2(c, a, p) >= 0


def ear_clip(p: Polygon2D) -> list[tuple[int, int, int]]:
    """Triangulate a simple polygon into ``len(p) - 2`` CCW triangles.

    Classic O(n^2) ear clipping. An ear is a strictly convex vertex whose
    triangle contains no other remaining vertex; collinear vertices are
    clipped as zero-area ears only when no proper ear exists.
    """
    if not is_simple(p):
        raise SelfIntersectionError("cannot triangulate a self-intersecting polygon")
    pts = p.points
    scale = float(np.ptp(pts, axis=0).max()) ** 2
    eps = 1e-14 * scale
    idx = list(range(len(pts)))
    tris = []
    while len(idx) > 3:
        n = len(idx)
        ear = None
        for i in range(n):
            a, b, c = idx[i - 1], idx[i], idx[(i + 1) % n]
            if _cross2(pts[a], pts[b], pts[c]) <= eps:
                continue
            blocked = False
            for j in idx:
                if j in (a, b, c) or (pts[j] == pts[a]).all() or (pts[j] == pts[b]).all() \
                        or (pts[j] == pts[c]).all():
                    continue
                if _in_triangle(pts[j], pts[a], pts[b], pts[c]):
                    blocked = True
                    break
            if not blocked:
                ear = i
                break
        if ear is None:
            # only (near-)collinear vertices left to remove
            for i in range(n):
                a, b, c = idx[i - 1], idx[i], idx[(i + 1) % n]
                if abs(_cross2(pts[a], pts[b], pts[c])) <= eps:
                    ear = i
                    break
        if ear is None:
            raise SelfIntersectionError("no ear found; polygon is not simple")
        tris.append((idx[ear - 1], idx[ear], idx[(ear + 1) % n]))
        del idx[ear]
    tris.append(tuple(idx))
    return tris


def extrude_polygon(poly: PlanarPolygon3D, thickness: float) -> TriMesh:
    """Closed prism spanning ``thickness`` symmetrically about the polygon's plane."""
    if not thickness > 0:
        raise DegenerateError("extrusion thickness must be positive")
    caps = ear_clip(poly.outline)
    n = len(poly.outline)
    mid = poly.points3d
    half = 0.5 * thickness * poly.frame.normal
    verts = np.vstack([mid - half, mid + half])  # bottom 0..n-1, top n..2n-1
    tris = [(c, b, a) for a, b, c in caps]  # bottom faces -normal
    tris += [(a + n, b + n, c + n) for a, b, c in caps]
    for i in range(n):
        j = (i + 1) % n
        tris.append((i, j, j + n))
        tris.append((i, j + n, i + n))
    return TriMesh(verts, tris)


def linear_extrusion(results: Sequence[RegistrationResult]) -> list[ReconstructionMesh]:
    """One prism per ROI at its slab thickness, concatenated per class label."""
    groups: dict[str, tuple[list, list]] = {}
    for res, k, label, poly in _rois(results):
        try:
            mesh = extrude_polygon(poly, res.thickness_mm)
        except SelfIntersectionError as exc:
            raise SelfIntersectionError(f"{roi_id(res, k)}: {exc}") from None
        meshes, ids = groups.setdefault(label, ([], []))
        meshes.append(mesh)
        ids.append(roi_id(res, k))
    return [ReconstructionMesh(label, concatenate(groups[label][0]), LINEAR_EXTRUSION,
                               tuple(groups[label][1])) for label in sorted(groups)]


def reconstruct(results: Sequence[RegistrationResult], methods: Sequence[str] = METHODS,
                splatter: SplatterConfig = SplatterConfig()) -> list[ReconstructionMesh]:
    out = []
    for method in methods:
        if method == CONVEX_HULL:
            out.append(convex_hull(results))
        elif method == GAUSSIAN_SPLATTER:
            out.extend(gaussian_splatter(results, splatter))
        elif method == LINEAR_EXTRUSION:
            out.extend(linear_extrusion(results))
        else:
            raise ArgumentError(f"unknown reconstruction method {method!r}")
    return out


# ---------------------------------------------------------------------------
# slide marking


def mark_slides(model: ReferenceModel, slide_ids: Sequence[str],
                class_label: str = "tumor-positive") -> list[RegistrationResult]:
    """Treat whole reference polygons as annotations, skipping registration.

    Each id yields an identity "registration" whose contour and single ROI
    are the reference polygon itself.
    """
    missing = [s for s in slide_ids if s not in model]
    if missing:
        raise UnknownPolygonError(f"not in reference model: {', '.join(missing)}")
    out = []
    for name in slide_ids:
        ref = model[name]
        poly = PlanarPolygon3D(ref.frame, ref.outline)
        out.append(RegistrationResult(
            polygon_name=name, case_id=model.case_id, slide_name=name,
            transform=Similarity2D(), iou=1.0, restart_angle=0.0, iterations_used=0,
            registered_contour=poly, registered_rois=((class_label, poly),),
            thickness_mm=ref.thickness_mm, region=ref.region))
    return out


# ---------------------------------------------------------------------------
# export


def mesh_filename(case_id: str, r: ReconstructionMesh) -> str:
    return f"{_safe(case_id)}_{r.method}_{_safe(r.class_label)}.obj"


def export_reconstructions(meshes: Sequence[ReconstructionMesh],
                           case_id: str) -> tuple[dict[str, str], str]:
    """OBJ text per mesh and a JSON summary with volumes and provenance."""
    files, summary = {}, []
    for r in meshes:
        name = mesh_filename(case_id, r)
        files[name] = write_obj(r.mesh, header=f"{r.method} {r.class_label}")
        summary.append({"file": name, "method": r.method, "class_label": r.class_label,
                        "volume_mm3": r.volume, "triangles": int(len(r.mesh.triangles)),
                        "provenance": list(r.provenance)})
    doc = {"case_id": case_id, "meshes": summary}
    return files, json.dumps(doc, indent=2, sort_keys=True) + "\n"
