import json
import math
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pytest import approx

from prostate_recon.errors import (ArgumentError, DegenerateError, InsufficientPointsError,
                                   SelfIntersectionError, UnknownPolygonError)
from prostate_recon.geometry import (PlaneFrame, Polygon2D, TriMesh, is_closed, load_mesh,
                                     mesh_volume, points_in_polygon, polygon_area, uv_ellipsoid)
from prostate_recon.protocol import Region
from prostate_recon.reconstruction import (CONVEX_HULL, GAUSSIAN_SPLATTER, HULL_LABEL,
                                           LINEAR_EXTRUSION, METHODS, SplatterConfig,
                                           convex_hull, ear_clip, export_reconstructions,
                                           extrude_polygon, gaussian_splatter, hull_of_points,
                                           linear_extrusion, mark_slides, reconstruct,
                                           splat_parameters)
from prostate_recon.registration import PlanarPolygon3D, RegistrationResult, Similarity2D

from strategies import star_polygon, star_polygons

CUBE = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)


def square(x0, y0, w):
    return Polygon2D([[x0, y0], [x0 + w, y0], [x0 + w, y0 + w], [x0, y0 + w]])


def result(rois, frame=None, thickness=5.0, name="3L"):
    """Registration result carrying ``rois`` [(label, Polygon2D)] in ``frame``."""
    frame = frame or PlaneFrame.z_plane(0.0)
    contour = PlanarPolygon3D(frame, square(-50, -50, 100))
    return RegistrationResult(name, "C", name, Similarity2D(), 1.0, 0.0, 0, contour,
                              tuple((lbl, PlanarPolygon3D(frame, p)) for lbl, p in rois),
                              thickness, Region("central", 1))


def inside_hull(mesh: TriMesh, pts, tol=1e-9):
    """Signed distance of every point to every (outward) face plane is <= tol."""
    v, t = mesh.vertices, mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1)[:, None]
    d = np.einsum("fj,pj->pf", n, pts) - np.einsum("fj,fj->f", n, a)[None, :]
    return (d <= tol).all(axis=1)


# ---------------------------------------------------------------------------
# convex hull


def test_hull_cube_corners(rng):
    h = hull_of_points(CUBE)
    assert is_closed(h)
    assert mesh_volume(h) == approx(1.0, abs=1e-12)
    assert len(h.triangles) == 12
    assert inside_hull(h, rng.uniform(0, 1, (1000, 3))).all()
    assert not inside_hull(h, np.array([[1.1, 0.5, 0.5], [0.5, -0.01, 0.5]])).any()


def test_hull_two_parallel_squares():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    pts = np.vstack([np.c_[sq, np.zeros(4)], np.c_[sq, np.full(4, 5.0)]])
    assert mesh_volume(hull_of_points(pts)) == approx(5.0)


@pytest.mark.parametrize("seed", range(50))
def test_hull_contains_points_and_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(100, 3))
    pts = g / np.linalg.norm(g, axis=1)[:, None] * rng.uniform(0, 1, (100, 1)) ** (1 / 3)
    h = hull_of_points(pts)
    assert is_closed(h) and mesh_volume(h) > 0
    assert inside_hull(h, pts, tol=1e-6).all()
    again = hull_of_points(h.vertices)
    assert sorted(map(tuple, again.vertices)) == sorted(map(tuple, h.vertices))
    assert mesh_volume(again) == approx(mesh_volume(h), rel=1e-12)


def test_hull_coplanar_extruded():
    pts = np.c_[np.array([[0, 0], [2, 0], [2, 3], [0, 3], [1, 1]], float), np.full(5, 4.0)]
    h = hull_of_points(pts, thickness=0.5)
    assert mesh_volume(h) == approx(6 * 0.5)
    assert h.vertices[:, 2].min() == approx(3.75) and h.vertices[:, 2].max() == approx(4.25)


@pytest.mark.parametrize("pts, thickness", [
    (CUBE[:3], None),                                   # coplanar, no thickness
    (np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3.0]]), 1.0),  # collinear
    (CUBE[:2], 1.0),
])
def test_hull_insufficient(pts, thickness):
    with pytest.raises(InsufficientPointsError):
        hull_of_points(pts, thickness)


def test_convex_hull_merges_labels():
    r1 = result([("Gleason 3", square(0, 0, 2))], PlaneFrame.z_plane(0.0), name="3L")
    r2 = result([("Gleason 4", square(0, 0, 2))], PlaneFrame.z_plane(6.0), name="5L")
    h = convex_hull([r1, r2])
    assert h.class_label == HULL_LABEL and h.method == CONVEX_HULL
    assert h.volume == approx(4 * 6.0)
    assert h.provenance == ("3L/0:Gleason 3", "5L/0:Gleason 4")


def test_convex_hull_single_slice_uses_thickness():
    h = convex_hull([result([("G", square(0, 0, 2))], thickness=6.25)])
    assert h.volume == approx(4 * 6.25)


def test_convex_hull_without_rois():
    with pytest.raises(InsufficientPointsError):
        convex_hull([result([])])


# ---------------------------------------------------------------------------
# splatter


def test_splat_square_in_plane():
    frame = PlaneFrame.z_plane(7.0)
    poly = PlanarPolygon3D(frame, square(0, 0, 10))
    centre, semi = splat_parameters(poly, 5.0)
    assert centre == approx([5, 5, 7])
    assert semi[2] == approx(2.0 * 2.5)


def test_splat_rectangle_boundary_ratio():
    # boundary points of an axis-aligned 6x2 rectangle, dense along every edge
    rect = Polygon2D([[0, 0], [6, 0], [6, 2], [0, 2]])
    from prostate_recon.registration import upsample_polygon
    dense = upsample_polygon(rect, 64)
    poly = PlanarPolygon3D(PlaneFrame.z_plane(0.0), dense)
    _, semi = splat_parameters(poly, 1.0)
    xs = [float(p[0]) for p in dense.points]
    ys = [float(p[1]) for p in dense.points]
    assert semi[0] / semi[1] == approx(statistics.pstdev(xs) / statistics.pstdev(ys), rel=1e-9)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.5, 4.0), st.sampled_from(["z", "x"]))
def test_splat_against_independent_statistics(seed, factor, plane):
    rng = np.random.default_rng(seed)
    outline = Polygon2D(star_polygon(rng) * 8 + rng.uniform(-20, 20, 2))
    frame = PlaneFrame.z_plane(3.0) if plane == "z" else PlaneFrame.x_plane(-4.0)
    poly = PlanarPolygon3D(frame, outline)
    cfg = SplatterConfig(radius_factor=factor)
    centre, semi = splat_parameters(poly, 4.0, cfg)
    pts = [[float(c) for c in p] for p in poly.points3d]
    for axis in range(3):
        col = [p[axis] for p in pts]
        assert centre[axis] == approx(statistics.fmean(col), abs=1e-9)
        sigma = statistics.pstdev(col)
        normal_axis = 2 if plane == "z" else 0
        if axis == normal_axis:
            sigma = max(sigma, 2.0)
        assert semi[axis] == approx(factor * sigma, rel=1e-9, abs=1e-12)


def test_splat_normal_floor_override():
    poly = PlanarPolygon3D(PlaneFrame.z_plane(0.0), square(0, 0, 10))
    _, semi = splat_parameters(poly, 5.0, SplatterConfig(1.0, min_normal_sigma_mm=0.1))
    assert semi[2] == approx(0.1)


def test_ellipsoid_volume_at_fine_tessellation():
    a, b, c = 3.0, 2.0, 1.5
    m = uv_ellipsoid((a, b, c), (1, 2, 3), stacks=64, slices=128)
    assert mesh_volume(m) == approx(4 / 3 * math.pi * a * b * c, rel=5e-3)


def test_one_splat_mesh_per_class():
    rois = [("Gleason 3", square(0, 0, 3)), ("Gleason 4", square(5, 5, 3)),
            ("Gleason 3", square(10, 0, 2))]
    out = gaussian_splatter([result(rois)])
    assert [r.class_label for r in out] == ["Gleason 3", "Gleason 4"]
    assert out[0].provenance == ("3L/0:Gleason 3", "3L/2:Gleason 3")
    assert all(r.method == GAUSSIAN_SPLATTER and is_closed(r.mesh) for r in out)
    ids = [i for r in out for i in r.provenance]
    assert sorted(ids) == sorted(set(ids)) and len(ids) == 3


def test_splat_mesh_volume_matches_semi_axes():
    rois = [("G", square(0, 0, 4))]
    cfg = SplatterConfig(tessellation=(64, 128))
    out = gaussian_splatter([result(rois, thickness=5.0)], cfg)
    _, semi = splat_parameters(PlanarPolygon3D(PlaneFrame.z_plane(0.0), square(0, 0, 4)), 5.0)
    assert out[0].volume == approx(4 / 3 * math.pi * np.prod(semi), rel=5e-3)


@pytest.mark.parametrize("kwargs", [dict(radius_factor=0), dict(min_normal_sigma_mm=-1),
                                    dict(tessellation=(1, 8))])
def test_splatter_config_validation(kwargs):
    with pytest.raises(ArgumentError):
        SplatterConfig(**kwargs)


# ---------------------------------------------------------------------------
# ear clipping


def _tri_area(p, t):
    a, b, c = p[list(t)]
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def _check_triangulation(poly, tris):
    pts = poly.points
    assert len(tris) == len(pts) - 2
    areas = [_tri_area(pts, t) for t in tris]
    assert min(areas) >= -1e-12
    assert sum(areas) == approx(polygon_area(poly), rel=1e-9)
    cents = np.array([pts[list(t)].mean(axis=0) for t, a in zip(tris, areas) if a > 1e-12])
    assert points_in_polygon(cents, poly).all()


def test_ear_clip_square_and_hexagon():
    assert len(ear_clip(square(0, 0, 1))) == 2
    ang = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    hexagon = Polygon2D(np.c_[np.cos(ang), np.sin(ang)])
    tris = ear_clip(hexagon)
    _check_triangulation(hexagon, tris)
    assert sum(_tri_area(hexagon.points, t) for t in tris) == approx(3 * math.sqrt(3) / 2)


def _diagonal_is_interior(pts, i, j):
    """Brute force: the open segment i-j stays strictly inside the polygon."""
    samples = pts[i] + np.linspace(0.01, 0.99, 99)[:, None] * (pts[j] - pts[i])
    return bool(points_in_polygon(samples, Polygon2D(pts)).all())


def test_ear_clip_arrow():
    # reflex vertex at index 3
    arrow = Polygon2D([[0, 0], [2, 1], [0, 2], [0.8, 1]])
    pts = arrow.points
    valid = [(i, j) for i, j in ((0, 2), (1, 3)) if _diagonal_is_interior(pts, i, j)]
    assert valid == [(1, 3)]
    tris = ear_clip(arrow)
    _check_triangulation(arrow, tris)
    used = {tuple(sorted(e)) for t in tris for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))}
    assert (1, 3) in used and (0, 2) not in used


def test_ear_clip_collinear_vertices():
    p = Polygon2D([[0, 0], [1, 0], [2, 0], [2, 1], [1, 1], [0, 1]])
    _check_triangulation(p, ear_clip(p))


def test_ear_clip_comb():
    # base 5x1 with three 1x2 teeth
    comb = Polygon2D([[0, 0], [5, 0], [5, 3], [4, 3], [4, 1], [3, 1], [3, 3], [2, 3], [2, 1],
                      [1, 1], [1, 3], [0, 3]])
    assert polygon_area(comb) == approx(11.0)
    _check_triangulation(comb, ear_clip(comb))


@given(star_polygons(max_vertices=40))
def test_ear_clip_star(pts):
    p = Polygon2D(pts)
    _check_triangulation(p, ear_clip(p))


def test_ear_clip_rejects_bow_tie():
    with pytest.raises(SelfIntersectionError):
        ear_clip(Polygon2D([[0, 0], [1, 1], [1, 0], [0, 1]]))


# ---------------------------------------------------------------------------
# linear extrusion


L_SHAPE = Polygon2D([[0, 0], [1.5, 0], [1.5, 1], [0.5, 1], [0.5, 2], [0, 2]])


@pytest.mark.parametrize("poly, thickness, volume", [(square(0, 0, 1), 6.25, 6.25),
                                                     (L_SHAPE, 3.0, 6.0)])
def test_extrusion_volume(poly, thickness, volume):
    m = extrude_polygon(PlanarPolygon3D(PlaneFrame.z_plane(2.0), poly), thickness)
    assert is_closed(m)
    assert mesh_volume(m) == approx(volume, rel=1e-9)
    assert m.vertices[:, 2].min() == approx(2 - thickness / 2)


@pytest.mark.parametrize("seed", range(100))
def test_extrusion_identity_random_stars(seed):
    rng = np.random.default_rng(seed)
    p = Polygon2D(star_polygon(rng) * rng.uniform(1, 20))
    frame = PlaneFrame.from_normal(rng.normal(size=3) * 10, rng.normal(size=3))
    thickness = float(rng.uniform(0.5, 10))
    m = extrude_polygon(PlanarPolygon3D(frame, p), thickness)
    assert is_closed(m)
    assert len(m.triangles) == 2 * (len(p) - 2) + 2 * len(p)
    assert mesh_volume(m) == approx(polygon_area(p) * thickness, rel=1e-9)


def test_extrusion_sagittal_uses_own_thickness():
    r = result([("G", square(0, 0, 2))], PlaneFrame.x_plane(10.0), thickness=4.0)
    out = linear_extrusion([r])
    x = out[0].mesh.vertices[:, 0]
    assert x.min() == approx(8.0) and x.max() == approx(12.0)
    assert out[0].volume == approx(16.0)


def test_extrusion_groups_by_label():
    rois = [("b", square(0, 0, 1)), ("a", square(2, 2, 1)), ("b", square(4, 0, 2))]
    out = linear_extrusion([result(rois, thickness=2.0)])
    assert [r.class_label for r in out] == ["a", "b"]
    assert out[1].volume == approx(2.0 * (1 + 4))
    assert out[1].provenance == ("3L/0:b", "3L/2:b")
    assert all(r.method == LINEAR_EXTRUSION for r in out)


def test_extrusion_errors():
    poly = PlanarPolygon3D(PlaneFrame.z_plane(0), square(0, 0, 1))
    with pytest.raises(DegenerateError):
        extrude_polygon(poly, 0.0)
    bow = PlanarPolygon3D(PlaneFrame.z_plane(0), Polygon2D([[0, 0], [1, 1], [1, 0], [0, 1]]))
    with pytest.raises(SelfIntersectionError):
        extrude_polygon(bow, 1.0)


# ---------------------------------------------------------------------------
# slide marking and export


def test_mark_slides_extrusion(minimal_model):
    ids = ["3L", "4R", "5L"]
    marked = mark_slides(minimal_model, ids)
    assert [r.polygon_name for r in marked] == ids
    assert all(r.iou == 1.0 and r.registered_rois[0][0] == "tumor-positive" for r in marked)
    for r in marked:
        vol = extrude_polygon(r.registered_rois[0][1], r.thickness_mm)
        ref = minimal_model[r.polygon_name]
        assert mesh_volume(vol) == approx(ref.area * ref.thickness_mm, rel=1e-9)
    total = linear_extrusion(marked)[0].volume
    assert total == approx(sum(minimal_model[i].area * minimal_model[i].thickness_mm
                               for i in ids), rel=1e-9)


def test_mark_slides_edge_cases(minimal_model):
    assert mark_slides(minimal_model, []) == []
    with pytest.raises(UnknownPolygonError, match="9Z9"):
        mark_slides(minimal_model, ["3L", "9Z9"])


def test_reconstruct_all_methods(minimal_model):
    marked = mark_slides(minimal_model, ["5L", "7L"], "G4")
    out = reconstruct(marked)
    assert [r.method for r in out] == list(METHODS)
    assert all(is_closed(r.mesh) and r.volume > 0 for r in out)
    with pytest.raises(ArgumentError):
        reconstruct(marked, ["Marching"])


def test_export(minimal_model):
    marked = mark_slides(minimal_model, ["5L", "7L"], "Gleason 4")
    out = reconstruct(marked)
    files, summary = export_reconstructions(out, "MIN-001")
    assert sorted(files) == ["MIN-001_ConvexHull_ALL.obj", "MIN-001_GaussianSplatter_Gleason-4.obj",
                             "MIN-001_LinearExtrusion_Gleason-4.obj"]
    doc = json.loads(summary)
    for rec in doc["meshes"]:
        m = load_mesh(files[rec["file"]])
        assert mesh_volume(m) == approx(rec["volume_mm3"], rel=1e-6)
        assert len(m.triangles) == rec["triangles"]
