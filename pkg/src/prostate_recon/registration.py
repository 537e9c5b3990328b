"""Slide-contour to reference-polygon registration.

Pipeline per slide: upsample both outlines, pre-align by centroid and
largest extent, run rigid+scale Coherent Point Drift from several initial
rotations, keep the candidate with the best raster IoU, then carry the
annotations through the winning transform into 3D.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from ._cpd_kernel import estep_dense, estep_fused
from .annotations import SlideAnnotations
from .errors import DegenerateError, NoCandidateError, NonConvergenceError
from .geometry import PlaneFrame, Polygon2D
from .geometry.polygon import polygon_centroid
from .protocol import Region
from .slicing import ReferencePolygon, polyline_obj


# ---------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class Similarity2D:
    """``p -> scale * R(theta) p + translation``; theta in radians."""

    theta: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise DegenerateError(f"similarity scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))

    @classmethod
    def identity(cls) -> Similarity2D:
        return cls()

    @classmethod
    def rotation_about(cls, theta: float, centre) -> Similarity2D:
        c = np.asarray(centre, dtype=float)
        r = _rot(theta)
        return cls(theta, 1.0, tuple(c - r @ c))

    @property
    def rotation(self) -> np.ndarray:
        return _rot(self.theta)

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta) % 360.0

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + np.asarray(self.translation)

    def __matmul__(self, other: Similarity2D) -> Similarity2D:
        """``(a @ b).apply(p) == a.apply(b.apply(p))``."""
        t = self.scale * self.rotation @ np.asarray(other.translation) + np.asarray(self.translation)
        return Similarity2D(self.theta + other.theta, self.scale * other.scale, tuple(t))

    def inverse(self) -> Similarity2D:
        r_inv = _rot(-self.theta)
        t = -(r_inv @ np.asarray(self.translation)) / self.scale
        return Similarity2D(-self.theta, 1.0 / self.scale, tuple(t))

    def to_dict(self) -> dict:
        return {"theta_deg": math.degrees(self.theta), "scale": self.scale,
                "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> Similarity2D:
        return cls(math.radians(d["theta_deg"]), d["scale"], tuple(d["translation"]))


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def angle_difference_deg(a: float, b: float) -> float:
    """Smallest absolute difference between two angles in degrees."""
    d = (a - b) % 360.0
    return min(d, 360.0 - d)


@dataclass(frozen=True)
class CpdConfig:
    target_points: int = 500
    outlier_weight: float = 0.0
    max_iterations: int = 150
    sigma_tolerance: float = 1e-8
    rotation_restarts: int = 8
    restart_step_deg: float = 45.0
    iou_resolution: int = 512
    estimate_scale: bool = True

    def __post_init__(self):
        if self.target_points < 3:
            raise ValueError("target_points must be >= 3")
        if not 0.0 <= self.outlier_weight < 1.0:
            raise ValueError("outlier_weight must lie in [0, 1)")
        if self.max_iterations < 1 or self.rotation_restarts < 1:
            raise ValueError("max_iterations and rotation_restarts must be >= 1")
        if not self.sigma_tolerance > 0:
            raise ValueError("sigma_tolerance must be positive")
        if self.iou_resolution < 64:
            raise ValueError("iou_resolution must be >= 64")


@dataclass(frozen=True, eq=False)
class PlanarPolygon3D:
    frame: PlaneFrame
    outline: Polygon2D

    @property
    def points3d(self) -> np.ndarray:
        return self.frame.lift(self.outline.points)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    polygon_name: str
    case_id: str
    slide_name: str
    transform: Similarity2D
    iou: float
    restart_angle: float
    iterations_used: int
    registered_contour: PlanarPolygon3D
    registered_rois: tuple[tuple[str, PlanarPolygon3D], ...]
    thickness_mm: float
    region: Region
    converged: bool = True
    candidates: tuple[tuple[float, float, int], ...] = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# upsampling / pre-alignment


def upsample_polygon(p: Polygon2D, target: int) -> Polygon2D:
    """Insert midpoints of the currently longest edge until ``len >= target``.

    Original vertices are kept and new ones lie on existing edges, so the
    outline (area, perimeter) is unchanged. Ties go to the lowest edge index.
    """
    if len(p) >= target:
        return p
    pts = [tuple(q) for q in p.points]
    lengths = list(np.linalg.norm(np.roll(p.points, -1, axis=0) - p.points, axis=1))
    while len(pts) < target:
        i = int(np.argmax(lengths))
        j = (i + 1) % len(pts)
        a, b = pts[i], pts[j]
        mid = ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0)
        half = lengths[i] / 2.0
        pts.insert(i + 1, mid)
        lengths[i] = half
        lengths.insert(i + 1, half)
    return Polygon2D(np.array(pts))


def _largest_extent(p: Polygon2D) -> float:
    lo, hi = p.bounds()
    return float((hi - lo).max())


def prealign(moving: Polygon2D, fixed: Polygon2D) -> Similarity2D:
    """Scale by the ratio of largest bounding-box sides and match area centroids."""
    m_ext, f_ext = _largest_extent(moving), _largest_extent(fixed)
    if m_ext <= 0 or f_ext <= 0:
        raise DegenerateError("cannot pre-align a polygon with zero extent")
    s = f_ext / m_ext
    t = polygon_centroid(fixed) - s * polygon_centroid(moving)
    return Similarity2D(0.0, s, tuple(t))


# ---------------------------------------------------------------------------
# coherent point drift


class CpdFit(NamedTuple):
    transform: Similarity2D
    iterations: int
    sigma2: float
    converged: bool


def cpd_similarity(fixed, moving, cfg: CpdConfig = CpdConfig(),
                   init: Similarity2D = Similarity2D(), backend: str = "fused") -> CpdFit:
    """Rigid + isotropic-scale Coherent Point Drift.

    ``fixed`` (N, 2) are the data points, ``moving`` (M, 2) the GMM
    centroids. Returns the transform mapping ``moving`` onto ``fixed``
    (including ``init``), the iteration count, the final variance and
    whether the variance criterion was met before ``max_iterations``.

    ``backend="fused"`` streams the E-step through a compiled kernel that
    never stores the (M, N) posterior; ``"dense"`` is the plain numpy
    version, kept as a reference.
    """
    estep = {"fused": estep_fused, "dense": estep_dense}.get(backend)
    if estep is None:
        raise ValueError(f"unknown CPD backend {backend!r}")
    x = np.asarray(fixed, dtype=float)
    y = np.asarray(moving, dtype=float)
    if len(x) < 3 or len(y) < 3:
        raise DegenerateError("CPD needs at least 3 points per set")
    n, dim = x.shape
    m = len(y)
    w = cfg.outlier_weight

    # work in centred coordinates; the sufficient statistics lose precision otherwise
    xbar, ybar = x.mean(axis=0), y.mean(axis=0)
    x = x - xbar
    y = y - ybar
    r = init.rotation
    s = init.scale
    t = np.asarray(init.translation, dtype=float) + s * r @ ybar - xbar
    ty = s * y @ r.T + t
    sigma2 = float((m * (x ** 2).sum() + n * (ty ** 2).sum()
                    - 2.0 * x.sum(axis=0) @ ty.sum(axis=0)) / (dim * n * m))
    extent2 = float(np.ptp(np.vstack([x, ty]), axis=0).max()) ** 2
    floor = 1e-14 * max(extent2, 1e-300)

    converged = False
    it = 0
    while it < cfg.max_iterations:
        it += 1
        c = (2.0 * np.pi * sigma2) ** (dim / 2.0) * w / (1.0 - w) * m / n if w > 0 else 0.0
        np_, sum_x, sum_y, sxx, syy, a_raw = estep(x, ty, y, sigma2, c)
        if not np_ > 0:
            raise NonConvergenceError("all correspondence mass vanished")

        # M-step
        mu_x = sum_x / np_
        mu_y = sum_y / np_
        a = a_raw - np_ * np.outer(mu_x, mu_y)
        u, _, vt = np.linalg.svd(a)
        c_fix = np.eye(dim)
        c_fix[-1, -1] = np.linalg.det(u @ vt)
        r = u @ c_fix @ vt
        tr_ar = float(np.trace(a.T @ r))
        tr_xx = sxx - np_ * float(mu_x @ mu_x)
        tr_yy = syy - np_ * float(mu_y @ mu_y)
        if cfg.estimate_scale:
            s = tr_ar / tr_yy
            new_sigma2 = (tr_xx - s * tr_ar) / (np_ * dim)
        else:
            new_sigma2 = (tr_xx - 2.0 * s * tr_ar + s * s * tr_yy) / (np_ * dim)
        t = mu_x - s * r @ mu_y
        ty = s * y @ r.T + t

        if not math.isfinite(new_sigma2) or not math.isfinite(s):
            raise NonConvergenceError("CPD variance became non-finite")
        if new_sigma2 <= floor:
            sigma2 = floor
            converged = True
            break
        change = abs(sigma2 - new_sigma2) / sigma2
        sigma2 = new_sigma2
        if change < cfg.sigma_tolerance:
            converged = True
            break

    theta = math.atan2(r[1, 0], r[0, 0])
    t = t + xbar - s * r @ ybar
    return CpdFit(Similarity2D(theta, s, tuple(t)), it, sigma2, converged)


# ---------------------------------------------------------------------------
# IoU by rasterization


def _raster(points: np.ndarray, x0: float, y0: float, cell: float, nx: int, ny: int) -> np.ndarray:
    """Even-odd fill sampled at cell centres, via per-row crossing parity."""
    a = points
    b = np.roll(points, -1, axis=0)
    ylo = np.minimum(a[:, 1], b[:, 1])
    yhi = np.maximum(a[:, 1], b[:, 1])
    # rows whose centre y satisfies ylo <= y < yhi
    r0 = np.clip(np.ceil((ylo - y0) / cell - 0.5), 0, ny).astype(np.int64)
    r1 = np.clip(np.ceil((yhi - y0) / cell - 0.5), 0, ny).astype(np.int64)
    counts = np.maximum(r1 - r0, 0)
    toggles = np.zeros((ny, nx + 1), dtype=np.int32)
    if counts.sum():
        edge = np.repeat(np.arange(len(a)), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        rows = r0[edge] + offsets
        yc = y0 + (rows + 0.5) * cell
        ea, eb = a[edge], b[edge]
        xc = ea[:, 0] + (yc - ea[:, 1]) * (eb[:, 0] - ea[:, 0]) / (eb[:, 1] - ea[:, 1])
        # first column whose centre lies strictly right of the crossing
        cols = np.clip(np.floor((xc - x0) / cell - 0.5).astype(np.int64) + 1, 0, nx)
        np.add.at(toggles, (rows, cols), 1)
    return (np.cumsum(toggles, axis=1)[:, :nx] % 2).astype(bool)


def iou(a: Polygon2D, b: Polygon2D, resolution: int = 512) -> float:
    """Intersection over union of two polygons on a shared raster.

    The grid spans the union bounding box with ``resolution`` cells along its
    longer side; cells count as inside by even-odd test of their centres.
    """
    if resolution < 64:
        raise ValueError("resolution must be >= 64")
    pa, pb = a.points, b.points
    lo = np.minimum(pa.min(axis=0), pb.min(axis=0))
    hi = np.maximum(pa.max(axis=0), pb.max(axis=0))
    span = float((hi - lo).max())
    if not span > 0:
        raise DegenerateError("polygons have zero extent")
    cell = span / resolution
    nx = max(1, int(math.ceil((hi[0] - lo[0]) / cell - 1e-9)))
    ny = max(1, int(math.ceil((hi[1] - lo[1]) / cell - 1e-9)))
    ra = _raster(pa, lo[0], lo[1], cell, nx, ny)
    rb = _raster(pb, lo[0], lo[1], cell, nx, ny)
    union = np.count_nonzero(ra | rb)
    if union == 0:
        raise DegenerateError("both polygons rasterize to nothing")
    return np.count_nonzero(ra & rb) / union


# ---------------------------------------------------------------------------
# per-slide registration


def register_slide(s: SlideAnnotations, ref: ReferencePolygon, cfg: CpdConfig = CpdConfig(),
                   case_id: str = "") -> RegistrationResult:
    """Register one slide's contour onto ``ref`` and lift its annotations to 3D."""
    fixed_poly = upsample_polygon(ref.outline, cfg.target_points)
    moving_poly = upsample_polygon(s.contour, cfg.target_points)
    base = prealign(moving_poly, fixed_poly)
    centre = polygon_centroid(fixed_poly)

    candidates = []
    best = None
    for k in range(cfg.rotation_restarts):
        angle = k * cfg.restart_step_deg
        init = Similarity2D.rotation_about(math.radians(angle), centre) @ base
        try:
            fit = cpd_similarity(fixed_poly.points, moving_poly.points, cfg, init)
            moved = Polygon2D(fit.transform.apply(moving_poly.points))
            score = iou(moved, ref.outline, cfg.iou_resolution)
        except (NonConvergenceError, DegenerateError):
            continue
        candidates.append((angle, score, fit.iterations))
        if best is None or score > best[1]:
            best = (angle, score, fit)
    if best is None:
        raise NoCandidateError(f"{s.slide_name}: every rotation restart failed")

    angle, score, fit = best
    tf = fit.transform
    contour = PlanarPolygon3D(ref.frame, Polygon2D(tf.apply(s.contour.points)))
    rois = tuple((label, PlanarPolygon3D(ref.frame, Polygon2D(tf.apply(poly.points))))
                 for label, poly in s.rois)
    return RegistrationResult(ref.name, case_id, s.slide_name, tf, score, angle, fit.iterations,
                              contour, rois, ref.thickness_mm, ref.region, fit.converged,
                              tuple(candidates))


def register_all(pairs: Sequence[tuple[SlideAnnotations, ReferencePolygon]], cfg: CpdConfig,
                 case_id: str) -> list[RegistrationResult]:
    return [register_slide(s, ref, cfg, case_id) for s, ref in pairs]


# ---------------------------------------------------------------------------
# export / import


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "-", label).strip("-") or "unlabelled"


def _record(res: RegistrationResult, kind: str, label: str | None, index: int,
            poly: PlanarPolygon3D) -> dict:
    pts = poly.points3d
    n = len(pts)
    return {
        "name": res.slide_name,
        "polygon": res.polygon_name,
        "case_id": res.case_id,
        "kind": kind,
        "class_label": label,
        "index": index,
        "points": pts.tolist(),
        "edges": [[i, (i + 1) % n] for i in range(n)],
        "frame": poly.frame.to_dict(),
        "thickness_mm": res.thickness_mm,
        "region": res.region.kind,
        "slice_index": res.region.index,
        "iou": res.iou,
        "restart_angle_deg": res.restart_angle,
        "iterations": res.iterations_used,
        "converged": res.converged,
        "transform": res.transform.to_dict(),
    }


def registered_records(results: Sequence[RegistrationResult]) -> list[dict]:
    out = []
    for res in results:
        out.append(_record(res, "contour", None, 0, res.registered_contour))
        per_class: dict[str, int] = {}
        for label, poly in res.registered_rois:
            per_class[label] = per_class.get(label, 0) + 1
            out.append(_record(res, "roi", label, per_class[label], poly))
    return out


def serialize_registered(results: Sequence[RegistrationResult],
                         per: str = "slide") -> tuple[str, dict[str, str]]:
    """Registered annotations as JSON plus OBJ polylines.

    ``per="slide"`` writes one OBJ per slide (contour and ROIs as separate
    objects); ``per="annotation"`` writes one OBJ per annotation, named
    ``<case>_<polygon>.obj`` for the contour and
    ``<case>_<polygon>_<class>_<k>.obj`` for ROIs.
    """
    if per not in ("slide", "annotation"):
        raise ValueError("per must be 'slide' or 'annotation'")
    records = registered_records(results)
    text = json.dumps(records, indent=1, sort_keys=True) + "\n"
    objs: dict[str, str] = {}
    for res in results:
        stem = f"{_safe(res.case_id)}_{_safe(res.polygon_name)}"
        parts = [("Contour", res.registered_contour.points3d, f"{stem}.obj")]
        per_class: dict[str, int] = {}
        for label, poly in res.registered_rois:
            per_class[label] = per_class.get(label, 0) + 1
            parts.append((f"{label}_{per_class[label]}", poly.points3d,
                          f"{stem}_{_safe(label)}_{per_class[label]}.obj"))
        if per == "annotation":
            for name, pts, fname in parts:
                objs[fname] = polyline_obj(pts, _safe(name))
        else:
            chunks, offset = [], 0
            for name, pts, _ in parts:
                chunks.append(polyline_obj(pts, _safe(name), offset))
                offset += len(pts)
            objs[f"{stem}.obj"] = "".join(chunks)
    return text, objs


def parse_registered(text: str) -> list[RegistrationResult]:
    """Rebuild results from :func:`serialize_registered` JSON."""
    records = json.loads(text)
    if not isinstance(records, list):
        raise ValueError("registered results must be a JSON array")
    grouped: dict[tuple[str, str], list[dict]] = {}
    for rec in records:
        grouped.setdefault((rec["case_id"], rec["polygon"]), []).append(rec)
    results = []
    for (case_id, name), recs in grouped.items():
        contour = None
        rois = []
        for rec in recs:
            frame = PlaneFrame.from_dict(rec["frame"])
            poly = PlanarPolygon3D(frame, Polygon2D(frame.project(np.asarray(rec["points"]))))
            if rec["kind"] == "contour":
                contour = (rec, poly)
            else:
                rois.append((rec["class_label"], poly))
        if contour is None:
            raise ValueError(f"registered results for {name} lack a contour record")
        rec, cpoly = contour
        results.append(RegistrationResult(
            name, case_id, rec["name"], Similarity2D.from_dict(rec["transform"]), rec["iou"],
            rec["restart_angle_deg"], rec["iterations"], cpoly, tuple(rois),
            rec["thickness_mm"], Region(rec["region"], rec["slice_index"]),
            rec.get("converged", True)))
    return results


def with_case(res: RegistrationResult, case_id: str) -> RegistrationResult:
    return replace(res, case_id=case_id)
