import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pytest import approx

from prostate_recon.annotations import (SlideAnnotations, SlideMapping, annotations_to_geojson,
                                        classification_of, parse_geojson_annotations,
                                        resolve_mapping)
from prostate_recon.errors import (DuplicateAssignmentError, GeometryError, MissingContourError,
                                   MultipleContourError, SchemaError, UnknownPolygonError,
                                   UnmappedFileError)
from prostate_recon.geometry import Polygon2D

from strategies import star_polygon

CONTOUR = [[0, 0], [1000, 0], [1000, 800], [0, 800], [0, 0]]


def square(x, y, w=50):
    return [[x, y], [x + w, y], [x + w, y + w], [x, y + w], [x, y]]


def feature(label, coords, gtype="Polygon", style="name"):
    props = {"name": {"classification": {"name": label}}, "string": {"classification": label},
             "class": {"class": label}, "none": {}}[style]
    return {"type": "Feature", "geometry": {"type": gtype, "coordinates": coords},
            "properties": props}


def collection(*features):
    return json.dumps({"type": "FeatureCollection", "features": list(features)})


def minimal(label="Contour"):
    return SlideAnnotations("s", Polygon2D(np.array(CONTOUR[:-1], float) / 1000))


# ---------------------------------------------------------------------------
# parsing


def test_contour_and_five_rois():
    rois = [feature("Gleason 4", [square(100 + 150 * k, 300)]) for k in range(5)]
    ann = parse_geojson_annotations(collection(feature("Contour", [CONTOUR]), *rois), "3L1",
                                    scale=0.5e-3)
    assert ann.slide_name == "3L1"
    assert len(ann.rois) == 5
    assert {label for label, _ in ann.rois} == {"Gleason 4"}
    assert ann.contour.bounds()[1] == approx([0.5, 0.4])


def test_contour_only():
    ann = parse_geojson_annotations(collection(feature("Contour", [CONTOUR])), "x", 1.0)
    assert ann.rois == ()


def test_two_contours():
    text = collection(feature("Contour", [CONTOUR]), feature("Contour", [square(0, 0)]))
    with pytest.raises(MultipleContourError):
        parse_geojson_annotations(text, "x", 1.0)


def test_missing_contour():
    with pytest.raises(MissingContourError):
        parse_geojson_annotations(collection(feature("Gleason 3", [square(0, 0)])), "x", 1.0)


@pytest.mark.parametrize("style", ["name", "string", "class"])
def test_classification_lookup_order(style):
    assert classification_of(feature("Gleason 5", [CONTOUR], style=style)) == "Gleason 5"


def test_classification_precedence():
    feat = {"properties": {"classification": {"name": "A"}, "class": "B"}}
    assert classification_of(feat) == "A"
    assert classification_of({"properties": {"class": "B"}}) == "B"
    assert classification_of({"properties": None}) is None


def test_unclassified_features_skipped():
    text = collection(feature("Contour", [CONTOUR]), feature("x", [square(0, 0)], style="none"))
    assert parse_geojson_annotations(text, "x", 1.0).rois == ()


def test_labels_verbatim():
    text = collection(feature("Contour", [CONTOUR]), feature(" gleason 4+3 ", [square(0, 0)]))
    assert parse_geojson_annotations(text, "x", 1.0).rois[0][0] == " gleason 4+3 "


def test_multipolygon_roi_split():
    multi = [[square(100, 100)], [square(300, 300), square(310, 310, 10)]]
    text = collection(feature("Contour", [CONTOUR]), feature("Gleason 4", multi, "MultiPolygon"))
    ann = parse_geojson_annotations(text, "x", 1.0)
    assert len(ann.rois) == 2
    assert [polygon_area_of(p) for _, p in ann.rois] == approx([2500, 2500])


def polygon_area_of(p):
    from prostate_recon.geometry import polygon_area
    return polygon_area(p)


def test_holes_ignored():
    ring_with_hole = [CONTOUR, square(400, 400, 100)]
    ann = parse_geojson_annotations(collection(feature("Contour", ring_with_hole)), "x", 1.0)
    assert polygon_area_of(ann.contour) == approx(800000)


def test_multipolygon_contour_rejected():
    text = collection(feature("Contour", [[CONTOUR]], "MultiPolygon"))
    with pytest.raises(GeometryError):
        parse_geojson_annotations(text, "x", 1.0)


@pytest.mark.parametrize("ring", [
    [[0, 0], [10, 10], [10, 0], [0, 10], [0, 0]],  # bow tie
    [[0, 0], [1, 1], [0, 0]],                       # fewer than 3 points
])
def test_bad_rings(ring):
    with pytest.raises(GeometryError):
        parse_geojson_annotations(collection(feature("Contour", [ring])), "x", 1.0)


@pytest.mark.parametrize("text", [
    "not json",
    json.dumps({"type": "Topology"}),
    json.dumps({"type": "FeatureCollection", "features": {}}),
    json.dumps({"type": "FeatureCollection", "features": [{"type": "Feature"}]}),
    collection(feature("Contour", [CONTOUR]), feature("G", [CONTOUR], "LineString")),
    collection(feature("Contour", [[["a", "b"], [1, 2], [3, 4]]])),
])
def test_schema_errors(text):
    with pytest.raises(SchemaError):
        parse_geojson_annotations(text, "x", 1.0)


def test_bare_feature_array_accepted():
    text = json.dumps([feature("Contour", [CONTOUR])])
    assert parse_geojson_annotations(text, "x", 1.0).contour is not None


def test_bad_scale():
    with pytest.raises(SchemaError):
        parse_geojson_annotations(collection(feature("Contour", [CONTOUR])), "x", 0.0)


def test_roi_outside_contour_bbox():
    text = collection(feature("Contour", [CONTOUR]), feature("G", [square(5000, 5000)]))
    with pytest.raises(GeometryError):
        parse_geojson_annotations(text, "x", 1.0)


def test_flip_y():
    text = collection(feature("Contour", [CONTOUR]), feature("G", [square(100, 100)]))
    plain = parse_geojson_annotations(text, "x", 1.0)
    flipped = parse_geojson_annotations(text, "x", 1.0, flip_y=True)
    assert polygon_area_of(flipped.contour) == approx(polygon_area_of(plain.contour))
    assert sorted(flipped.rois[0][1].points[:, 1]) == approx(sorted(-plain.rois[0][1].points[:, 1]))


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1.0, 0.25e-3, 0.2527e-3, 3.7]))
def test_geojson_roundtrip(seed, scale):
    rng = np.random.default_rng(seed)
    contour = Polygon2D(star_polygon(rng) * 20)
    rois = tuple((f"Gleason {k}", Polygon2D(star_polygon(rng) * 5)) for k in range(3))
    ann = SlideAnnotations("s", contour, rois)
    back = parse_geojson_annotations(annotations_to_geojson(ann, scale), "s", scale)
    assert back.contour.points == approx(contour.points, rel=1e-9, abs=1e-12)
    for (la, pa), (lb, pb) in zip(back.rois, rois):
        assert la == lb
        assert pa.points == approx(pb.points, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------------------
# mapping


@pytest.fixture
def files(minimal_model):
    ann = minimal()
    return {f"{name}.geojson": ann for name in ("3L", "4R")}


def test_mapping_by_stem(files, minimal_model):
    pairs = resolve_mapping(files, minimal_model)
    assert [rp.name for _, rp in pairs] == ["3L", "4R"]


def test_mapping_follows_protocol_order(minimal_model):
    ann = minimal()
    names = list(reversed(minimal_model.names))
    pairs = resolve_mapping({f"{n}.geojson": ann for n in names}, minimal_model)
    assert [rp.name for _, rp in pairs] == minimal_model.names


def test_manifest_remap(files, minimal_model):
    files = dict(files, **{"tumor_slide_A.geojson": minimal()})
    m = SlideMapping.from_json(json.dumps([{"file": "tumor_slide_A.geojson", "polygon": "5L"}]))
    pairs = resolve_mapping(files, minimal_model, m)
    assert [rp.name for _, rp in pairs] == ["3L", "4R", "5L"]


def test_manifest_matches_basename(minimal_model):
    m = SlideMapping((("a.geojson", "5L"),))
    pairs = resolve_mapping({"/data/slides/a.geojson": minimal()}, minimal_model, m)
    assert pairs[0][1].name == "5L"


@pytest.mark.parametrize("stem", ["9Q", "99L"])
def test_unknown_polygon(stem, minimal_model):
    with pytest.raises(UnknownPolygonError):
        resolve_mapping({f"{stem}.geojson": minimal()}, minimal_model)


def test_manifest_unknown_target(minimal_model):
    m = SlideMapping((("a.geojson", "77R"),))
    with pytest.raises(UnknownPolygonError):
        resolve_mapping({"a.geojson": minimal()}, minimal_model, m)


def test_unmapped_with_manifest(minimal_model):
    m = SlideMapping((("a.geojson", "5L"),))
    with pytest.raises(UnmappedFileError):
        resolve_mapping({"a.geojson": minimal(), "other.geojson": minimal()}, minimal_model, m)


def test_lenient_mode_warns(minimal_model, caplog):
    with caplog.at_level(logging.WARNING):
        pairs = resolve_mapping({"3L.geojson": minimal(), "junk.geojson": minimal()},
                                minimal_model, strict=False)
    assert [rp.name for _, rp in pairs] == ["3L"]
    assert "junk.geojson" in caplog.text


def test_duplicate_assignment(minimal_model):
    m = SlideMapping((("a.geojson", "3L"),))
    with pytest.raises(DuplicateAssignmentError):
        resolve_mapping({"a.geojson": minimal(), "3L.geojson": minimal()}, minimal_model, m)
    with pytest.raises(DuplicateAssignmentError):
        SlideMapping((("a", "3L"), ("b", "3L")))


@pytest.mark.parametrize("text", ["{", "{}", json.dumps([{"file": "a"}])])
def test_manifest_schema(text):
    with pytest.raises(SchemaError):
        SlideMapping.from_json(text)
