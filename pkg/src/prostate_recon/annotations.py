"""Slide annotations from GeoJSON and their assignment to reference polygons."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (DegenerateError, DuplicateAssignmentError, GeometryError,
                     MissingContourError, MultipleContourError, SchemaError, UnknownPolygonError,
                     UnmappedFileError, ValidationError)
from .geometry import Polygon2D, is_simple
from .protocol import FragmentId
from .slicing import ReferenceModel, ReferencePolygon

log = logging.getLogger(__name__)

CONTOUR_CLASS = "Contour"


@dataclass(frozen=True, eq=False)
class SlideAnnotations:
    slide_name: str
    contour: Polygon2D
    rois: tuple[tuple[str, Polygon2D], ...] = ()

    def __post_init__(self):
        lo, hi = self.contour.bounds()
        for label, poly in self.rois:
            if not label:
                raise GeometryError(f"{self.slide_name}: empty class label")
            plo, phi = poly.bounds()
            if (phi < lo).any() or (plo > hi).any():
                raise GeometryError(f"{self.slide_name}: ROI {label!r} lies outside the "
                                    "contour bounding box")


def classification_of(feature: dict) -> str | None:
    """Class name of a GeoJSON feature.

    Looks at ``properties.classification.name``, then a plain string
    ``properties.classification``, then ``properties.class``.
    """
    props = feature.get("properties") or {}
    cls = props.get("classification")
    if isinstance(cls, dict) and isinstance(cls.get("name"), str):
        return cls["name"]
    if isinstance(cls, str):
        return cls
    if isinstance(props.get("class"), str):
        return props["class"]
    return None


def _outer_rings(geometry: dict, where: str) -> list[list]:
    gtype = geometry.get("type")
    coords = geometry.get("coordinates")
    if not isinstance(coords, list):
        raise SchemaError(f"{where}: geometry without coordinates")
    if gtype == "Polygon":
        return [coords[0]] if coords else []
    if gtype == "MultiPolygon":
        return [poly[0] for poly in coords if poly]
    raise SchemaError(f"{where}: unsupported geometry type {gtype!r}")


def _ring_polygon(ring, scale: float, where: str, flip_y: bool = False) -> Polygon2D:
    try:
        arr = np.asarray(ring, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: ring coordinates are not numeric") from None
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise SchemaError(f"{where}: ring must be a list of [x, y] positions")
    arr = arr[:, :2] * scale
    if flip_y:
        arr[:, 1] *= -1.0
    try:
        poly = Polygon2D(arr)
    except DegenerateError as exc:
        raise GeometryError(f"{where}: {exc}") from None
    if not is_simple(poly):
        raise GeometryError(f"{where}: ring is self-intersecting")
    return poly


def parse_geojson_annotations(text: str, slide_name: str, scale: float,
                              flip_y: bool = False) -> SlideAnnotations:
    """Read one slide/fragment's annotations.

    ``scale`` converts GeoJSON coordinate units to millimetres (for pixel
    coordinates, microns-per-pixel / 1000). The single feature classified
    ``Contour`` becomes the tissue outline; every other classified outer
    ring becomes one ROI. Holes are ignored; unclassified features are
    skipped.

    ``flip_y`` negates y, turning image coordinates (y pointing down) into a
    right-handed frame. Registration recovers rotations but not mirror
    images, so slides scanned face-down need it.
    """
    if not scale > 0:
        raise SchemaError("scale factor must be positive")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{slide_name}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if isinstance(doc, list):
        features = doc  # QuPath may export a bare feature array
    elif isinstance(doc, dict) and doc.get("type") == "FeatureCollection":
        features = doc.get("features")
    elif isinstance(doc, dict) and doc.get("type") == "Feature":
        features = [doc]
    else:
        raise SchemaError(f"{slide_name}: expected a GeoJSON FeatureCollection")
    if not isinstance(features, list):
        raise SchemaError(f"{slide_name}: 'features' must be an array")

    contours, rois = [], []
    for i, feat in enumerate(features):
        where = f"{slide_name}: features[{i}]"
        if not isinstance(feat, dict) or not isinstance(feat.get("geometry"), dict):
            raise SchemaError(f"{where}: feature without geometry")
        label = classification_of(feat)
        if label is None:
            log.debug("%s: unclassified feature skipped", where)
            continue
        if label == CONTOUR_CLASS:
            if feat["geometry"].get("type") != "Polygon":
                raise GeometryError(f"{where}: contour must be a single Polygon")
            contours.append(_ring_polygon(_outer_rings(feat["geometry"], where)[0], scale, where,
                                          flip_y))
        else:
            for k, ring in enumerate(_outer_rings(feat["geometry"], where)):
                rois.append((label, _ring_polygon(ring, scale, f"{where}.ring[{k}]", flip_y)))
    if not contours:
        raise MissingContourError(f"{slide_name}: no feature classified {CONTOUR_CLASS!r}")
    if len(contours) > 1:
        raise MultipleContourError(f"{slide_name}: {len(contours)} features classified "
                                   f"{CONTOUR_CLASS!r}")
    return SlideAnnotations(slide_name, contours[0], tuple(rois))


def annotations_to_geojson(s: SlideAnnotations, scale: float = 1.0) -> str:
    """Inverse of :func:`parse_geojson_annotations` (coordinates divided by ``scale``)."""
    def feature(label, poly):
        ring = (poly.points / scale).tolist()
        ring.append(ring[0])
        return {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": {"classification": {"name": label}}}

    feats = [feature(CONTOUR_CLASS, s.contour)] + [feature(lbl, p) for lbl, p in s.rois]
    return json.dumps({"type": "FeatureCollection", "features": feats}, indent=1) + "\n"


# ---------------------------------------------------------------------------
# mapping


@dataclass(frozen=True)
class SlideMapping:
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        seen = set()
        for file, name in self.entries:
            if name in seen:
                raise DuplicateAssignmentError(f"polygon {name} assigned twice in manifest")
            seen.add(name)

    @classmethod
    def from_json(cls, text: str) -> SlideMapping:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest is not valid JSON: {exc.msg}") from None
        if not isinstance(doc, list):
            raise SchemaError("manifest must be a JSON array")
        entries = []
        for i, e in enumerate(doc):
            if not isinstance(e, dict) or set(e) != {"file", "polygon"}:
                raise SchemaError(f"manifest[{i}] must be {{'file': ..., 'polygon': ...}}")
            entries.append((str(e["file"]), str(e["polygon"])))
        return cls(tuple(entries))

    def lookup(self, file: str) -> str | None:
        for f, name in self.entries:
            if f == file or f == Path(file).name:
                return name
        return None


def resolve_mapping(files: Mapping[str, SlideAnnotations], model: ReferenceModel,
                    manifest: SlideMapping | None = None,
                    strict: bool = True) -> list[tuple[SlideAnnotations, ReferencePolygon]]:
    """Pair annotation files with reference polygons.

    A manifest entry wins; otherwise the file stem must equal the polygon's
    canonical fragment id (``3L1.geojson`` -> ``3L1``). Files that cannot be
    matched raise in strict mode and are skipped with a warning in lenient
    mode. Output follows the reference model's protocol order.
    """
    assigned: dict[str, tuple[str, SlideAnnotations]] = {}
    for file in sorted(files):
        ann = files[file]
        name = manifest.lookup(file) if manifest else None
        if name is not None:
            if name not in model:
                raise UnknownPolygonError(f"manifest maps {file} to unknown polygon {name!r}")
        else:
            stem = Path(file).stem
            if stem in model:
                name = stem
            else:
                try:
                    FragmentId.parse(stem)
                    why = f"no reference polygon named {stem!r}"
                except ValidationError:
                    why = f"file stem {stem!r} is not a fragment id"
                if not strict:
                    log.warning("skipping %s: %s", file, why)
                    continue
                if manifest is not None:
                    raise UnmappedFileError(f"{file}: not in manifest and {why}")
                raise UnknownPolygonError(f"{file}: {why}")
        if name in assigned:
            raise DuplicateAssignmentError(f"polygon {name} claimed by both "
                                           f"{assigned[name][0]} and {file}")
        assigned[name] = (file, ann)
    return [(assigned[name][1], model[name]) for name in model.names if name in assigned]
