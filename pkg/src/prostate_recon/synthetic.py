"""Synthetic cases with known ground truth.

Used by the test-suite and the experiment scripts: a generic model, a
protocol shaped like a routine grossing record (apex in 6, base in 8
sagittal fragments, central slices in quarters) and "slides" made by
moving reference outlines through a random similarity and jittering their
vertices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import SlideAnnotations, annotations_to_geojson
from .geometry import Polygon2D, generic_prostate_model, is_simple
from .geometry.polygon import points_in_polygon, polygon_centroid
from .protocol import SectioningProtocol, make_protocol, serialize_protocol
from .registration import Similarity2D
from .slicing import ReferencePolygon, build_reference_model

GENERIC_DIMS = (40.0, 30.0, 35.0)


def routine_protocol(case_id: str = "SYN-001", central_count: int = 3,
                     apex_offset: float = 8.0, base_offset: float = 8.0) -> SectioningProtocol:
    """Apex in 3+3, base in 4+4 sagittal fragments, central slices in quarters."""
    return make_protocol(case_id, apex_counts={"L": 3, "R": 3}, base_counts={"L": 4, "R": 4},
                         central_split=[True] * central_count, apex_offset=apex_offset,
                         base_offset=base_offset)


def minimal_protocol(case_id: str = "MIN-001", central_split: bool = False,
                     central_count: int = 1, offset: float = 5.0) -> SectioningProtocol:
    return make_protocol(case_id, apex_counts={"L": 1, "R": 1}, base_counts={"L": 1, "R": 1},
                         central_split=[central_split] * central_count, apex_offset=offset,
                         base_offset=offset)


def generic_model(dims=GENERIC_DIMS, tessellation=(32, 64)):
    return generic_prostate_model(*dims, tessellation=tessellation)


@dataclass(frozen=True)
class SyntheticSlide:
    annotations: SlideAnnotations
    truth: Similarity2D  # maps reference-plane coordinates to slide coordinates
    reference: ReferencePolygon


def random_similarity(rng: np.random.Generator, scale_range=(0.8, 1.2),
                      max_translation: float = 20.0) -> Similarity2D:
    theta = rng.uniform(0.0, 2.0 * math.pi)
    s = rng.uniform(*scale_range)
    # uniform over the disc of radius max_translation
    r = max_translation * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return Similarity2D(theta, s, (r * math.cos(phi), r * math.sin(phi)))


def roi_inside(ref: ReferencePolygon, rng: np.random.Generator, n_vertices: int = 12,
               fraction: float = 0.25) -> Polygon2D:
    """A small star-shaped ROI around an interior point of the reference outline."""
    outline = ref.outline
    lo, hi = outline.bounds()
    centre = polygon_centroid(outline)
    size = fraction * float((hi - lo).min())
    for _ in range(200):
        c = centre + rng.uniform(-0.5, 0.5, 2) * (hi - lo) * 0.5
        ang = np.sort(rng.uniform(0, 2 * math.pi, n_vertices))
        rad = size * rng.uniform(0.5, 1.0, n_vertices)
        pts = c + np.c_[rad * np.cos(ang), rad * np.sin(ang)]
        if points_in_polygon(pts, outline).all() and points_in_polygon(c[None], outline)[0] \
                and is_simple(pts):
            return Polygon2D(pts)
        size *= 0.95
    raise RuntimeError(f"could not place an ROI inside {ref.name}")


def make_slide(ref: ReferencePolygon, truth: Similarity2D, rng: np.random.Generator | None = None,
               jitter: float = 0.0, rois: int = 0, roi_label: str = "Gleason 4",
               name: str | None = None) -> SyntheticSlide:
    """Slide whose contour is ``truth`` applied to the reference outline plus jitter."""
    rng = rng if rng is not None else np.random.default_rng(0)
    roi_polys = [roi_inside(ref, rng) for _ in range(rois)]
    pts = truth.apply(ref.outline.points)
    if jitter > 0:
        # isotropic vertex noise; dense outlines may self-intersect, which
        # registration (point-based, even-odd IoU) tolerates
        pts = pts + rng.normal(0.0, jitter, pts.shape)
    contour = Polygon2D(pts)
    rois_out = tuple((roi_label, Polygon2D(truth.apply(p.points))) for p in roi_polys)
    ann = SlideAnnotations(name or ref.name, contour, rois_out)
    return SyntheticSlide(ann, truth, ref)


def synthetic_suite(polygons, seed: int = 0, jitter: float = 0.5, rois: int = 0,
                    scale_range=(0.8, 1.2), max_translation: float = 20.0) -> list[SyntheticSlide]:
    rng = np.random.default_rng(seed)
    slides = []
    for ref in polygons:
        truth = random_similarity(rng, scale_range, max_translation)
        slides.append(make_slide(ref, truth, rng, jitter=jitter, rois=rois))
    return slides


def write_synthetic_case(out_dir, protocol: SectioningProtocol | None = None, seed: int = 0,
                         jitter: float = 0.0, rois: int = 1, dims=GENERIC_DIMS,
                         tessellation=(32, 64), max_draws: int = 100) -> dict:
    """Write ``protocol.json`` and ``annotations/<id>.geojson`` for a synthetic case.

    Returns the ground-truth similarity per polygon name. Annotation
    coordinates are in millimetres (scale 1). GeoJSON ingest rejects
    self-intersecting rings, so with ``jitter > 0`` each slide is redrawn
    until its contour is simple (at most ``max_draws`` times); the clipped
    outlines of small fragments rarely survive even modest jitter.
    """
    out = Path(out_dir)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    protocol = protocol or routine_protocol()
    (out / "protocol.json").write_text(serialize_protocol(protocol))
    model = build_reference_model(generic_model(dims, tessellation), protocol)
    rng = np.random.default_rng(seed)
    truths = {}
    for ref in model.polygons:
        truth = random_similarity(rng)
        for _ in range(max_draws):
            sl = make_slide(ref, truth, rng, jitter=jitter, rois=rois)
            if is_simple(sl.annotations.contour):
                break
        else:
            raise RuntimeError(f"{ref.name}: no simple contour at jitter {jitter} mm")
        name = ref.name
        (out / "annotations" / f"{name}.geojson").write_text(annotations_to_geojson(sl.annotations))
        truths[name] = sl.truth
    return truths
