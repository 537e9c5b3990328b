"""Virtual slicing of a surface model into named reference polygons.

Frame convention: +x is patient left, +y ventral, +z towards the base
(apex at low z). Central slices are transverse z-planes; apex and base
fragments are sagittal x-planes.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateError, NoIntersectionError, OpenLoopError,
                     ProtocolMeshMismatchError)
from .geometry import AABB, PlaneFrame, Polygon2D, TriMesh, bounding_box, is_closed, signed_area
from .geometry.polygon import polygon_area, polygon_centroid
from .protocol import Region, SectioningProtocol, compartments

MIN_LOOP_AREA = 1e-6


@dataclass(frozen=True, eq=False)
class ReferencePolygon:
    name: str
    frame: PlaneFrame
    outline: Polygon2D
    thickness_mm: float
    region: Region

    @property
    def points3d(self) -> np.ndarray:
        return self.frame.lift(self.outline.points)

    @property
    def area(self) -> float:
        return polygon_area(self.outline)


@dataclass(frozen=True, eq=False)
class ReferenceModel:
    case_id: str
    polygons: tuple[ReferencePolygon, ...]
    source_extent: AABB
    _by_name: dict = field(default=None, repr=False)

    def __post_init__(self):
        names = [p.name for p in self.polygons]
        if len(set(names)) != len(names):
            raise ValueError("reference polygon names must be unique")
        object.__setattr__(self, "_by_name", {p.name: p for p in self.polygons})

    def __getitem__(self, name: str) -> ReferencePolygon:
        return self._by_name[name]

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self.polygons)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.polygons]


# ---------------------------------------------------------------------------
# plane / mesh intersection


def plane_section(m: TriMesh, plane: PlaneFrame) -> list[Polygon2D]:
    """Closed intersection loops of ``m`` with ``plane``, in plane coordinates.

    Vertices exactly on the plane are treated as lying on the positive side,
    so every crossing triangle contributes exactly one segment between two
    of its edges. Segments are chained through shared mesh edges, which is
    exact for an indexed closed mesh; loops are returned counter-clockwise
    and loops smaller than 1e-6 mm^2 are dropped.
    """
    d = plane.signed_distance(m.vertices)
    above = d >= 0
    tris = m.triangles
    side = above[tris]
    n_above = side.sum(axis=1)
    crossing = (n_above == 1) | (n_above == 2)
    if not crossing.any():
        raise NoIntersectionError("plane does not intersect the mesh")

    tris = tris[crossing]
    side = side[crossing]
    # for each crossing triangle find the two edges whose endpoints differ in side
    edge_pairs = []
    for k in range(3):
        a, b = tris[:, k], tris[:, (k + 1) % 3]
        edge_pairs.append((a, b, side[:, k] != side[:, (k + 1) % 3]))
    n_vert = len(m.vertices)
    seg_edges = np.zeros((len(tris), 2), dtype=np.int64)
    fill = np.zeros(len(tris), dtype=np.int64)
    for a, b, cut in edge_pairs:
        key = np.minimum(a, b) * n_vert + np.maximum(a, b)
        rows = np.nonzero(cut)[0]
        seg_edges[rows, fill[rows]] = key[rows]
        fill[rows] += 1

    # crossing point for every distinct cut edge
    keys = np.unique(seg_edges)
    ia, ib = keys // n_vert, keys % n_vert
    da, db = d[ia], d[ib]
    t = da / (da - db)
    pts3 = m.vertices[ia] + t[:, None] * (m.vertices[ib] - m.vertices[ia])
    pts2 = plane.project(pts3)
    pos = {int(k): i for i, k in enumerate(keys)}

    adjacency: dict[int, list[int]] = defaultdict(list)
    for e0, e1 in seg_edges:
        adjacency[int(e0)].append(int(e1))
        adjacency[int(e1)].append(int(e0))
    for key, nbrs in adjacency.items():
        if len(nbrs) != 2:
            raise OpenLoopError(f"section chain breaks at mesh edge {divmod(key, n_vert)}: "
                                f"{len(nbrs)} incident segments (open or non-manifold mesh)")

    loops: list[Polygon2D] = []
    visited: set[int] = set()
    for start in sorted(adjacency):
        if start in visited:
            continue
        chain = [start]
        visited.add(start)
        prev, cur = start, adjacency[start][0]
        while cur != start:
            if cur in visited:
                raise OpenLoopError("section chain revisits an edge before closing")
            visited.add(cur)
            chain.append(cur)
            a, b = adjacency[cur]
            prev, cur = cur, (b if a == prev else a)
        ring = pts2[[pos[k] for k in chain]]
        if abs(signed_area(ring)) < MIN_LOOP_AREA:
            continue
        try:
            loops.append(Polygon2D(ring))
        except DegenerateError:
            continue
    if not loops:
        raise NoIntersectionError("plane only grazes the mesh")
    return loops


# ---------------------------------------------------------------------------
# half-plane clipping


def clip_polygon(p: Polygon2D, point, normal) -> list[Polygon2D]:
    """Part of ``p`` on the side of the line through ``point`` that ``normal`` points to.

    Sutherland-Hodgman style edge walk; where the polygon leaves the
    half-plane the walk jumps along the cut line to the matching re-entry
    point, so a concave polygon cut into several pieces yields one simple
    polygon per piece. Vertices exactly on the line count as outside for
    both orientations, which keeps ``inside + outside`` area-conserving.
    """
    pts = p.points
    n = np.asarray(normal, dtype=float)
    if not np.linalg.norm(n) > 0:
        raise DegenerateError("clip normal must be non-zero")
    n = n / np.linalg.norm(n)
    origin = np.asarray(point, dtype=float)
    d = (pts - origin) @ n
    inside = d > 0
    if inside.all():
        return [p]
    if not inside.any():
        return []

    direction = np.array([-n[1], n[0]])
    # vertex ring with crossing points spliced in; crossings carry their line parameter
    ring: list[tuple[np.ndarray, str, float]] = []
    count = len(pts)
    for i in range(count):
        j = (i + 1) % count
        if inside[i]:
            ring.append((pts[i], "in", 0.0))
        if inside[i] != inside[j]:
            t = d[i] / (d[i] - d[j])
            x = pts[i] + t * (pts[j] - pts[i])
            ring.append((x, "exit" if inside[i] else "entry", float((x - origin) @ direction)))

    crossings = [k for k, r in enumerate(ring) if r[1] != "in"]
    # crossings alternate along the line for a simple polygon: pair them in sorted order
    order = sorted(crossings, key=lambda k: (ring[k][2], ring[k][1] == "entry"))
    partner = {}
    for a, b in zip(order[0::2], order[1::2]):
        partner[a], partner[b] = b, a

    used = [False] * len(ring)
    pieces: list[Polygon2D] = []
    for start in range(len(ring)):
        if used[start] or ring[start][1] == "exit":
            continue
        loop = []
        k = start
        while not used[k]:
            used[k] = True
            loop.append(ring[k][0])
            if ring[k][1] == "exit":
                k = partner[k]
                if used[k]:
                    break
                continue
            k = (k + 1) % len(ring)
        if len(loop) < 3:
            continue
        arr = np.array(loop)
        if signed_area(arr) <= 0:
            continue
        try:
            pieces.append(Polygon2D(arr))
        except DegenerateError:
            continue
    return pieces


def clip_polygon_multi(polys, half_planes) -> list[Polygon2D]:
    """Clip a set of polygons successively by several ``(point, normal)`` half-planes."""
    out = list(polys)
    for point, normal in half_planes:
        out = [piece for poly in out for piece in clip_polygon(poly, point, normal)]
    return out


# ---------------------------------------------------------------------------
# reference model


def _largest(polys: list[Polygon2D]) -> Polygon2D | None:
    polys = [q for q in polys if signed_area(q.points) > MIN_LOOP_AREA]
    if not polys:
        return None
    return max(polys, key=lambda q: signed_area(q.points))


def _union_centroid(loops: list[Polygon2D]) -> np.ndarray:
    areas = np.array([signed_area(q.points) for q in loops])
    cents = np.array([polygon_centroid(q) for q in loops])
    return (areas[:, None] * cents).sum(axis=0) / areas.sum()


def _compartment_half_planes(key: str, centre, axes=(0, 1)):
    """Half-planes selecting compartment ``key`` (L/R plus optional V/D) in 2D."""
    cx, cy = centre
    planes = []
    lr = np.zeros(2)
    lr[axes[0]] = 1.0 if key[0] == "L" else -1.0
    planes.append((np.array([cx, cy]), lr))
    if len(key) == 2:
        vd = np.zeros(2)
        vd[axes[1]] = 1.0 if key[1] == "V" else -1.0
        planes.append((np.array([cx, cy]), vd))
    return planes


def _band_extent(m: TriMesh, z_lo: float, z_hi: float) -> tuple[np.ndarray, np.ndarray]:
    """x/y extent of the part of ``m`` with ``z_lo <= z <= z_hi``."""
    v = m.vertices
    pts = [v[(v[:, 2] >= z_lo) & (v[:, 2] <= z_hi)]]
    e = np.concatenate([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]], m.triangles[:, [2, 0]]])
    a, b = v[e[:, 0]], v[e[:, 1]]
    for z in (z_lo, z_hi):
        cut = (a[:, 2] - z) * (b[:, 2] - z) < 0
        t = (z - a[cut, 2]) / (b[cut, 2] - a[cut, 2])
        pts.append(a[cut] + t[:, None] * (b[cut] - a[cut]))
    allp = np.concatenate(pts)
    return allp.min(axis=0), allp.max(axis=0)


def _central_polygons(m, spec, z_mid, thickness, case_polys):
    frame = PlaneFrame.z_plane(z_mid)
    try:
        loops = plane_section(m, frame)
    except NoIntersectionError:
        raise ProtocolMeshMismatchError(f"central slice {spec.index} at z={z_mid:.3f} "
                                        "does not intersect the mesh") from None
    centre = _union_centroid(loops)
    region = Region("central", spec.index)
    for fid in sorted(spec.ids, key=lambda f: compartments(spec.split_frontal).index(f.compartment)):
        piece = _largest(clip_polygon_multi(loops, _compartment_half_planes(fid.compartment, centre)))
        if piece is None:
            raise ProtocolMeshMismatchError(f"compartment {fid.compartment} of central slice "
                                            f"{spec.index} is empty")
        case_polys.append(ReferencePolygon(str(fid), frame, piece, thickness, region))


def _apex_base_polygons(m, spec, z_lo, z_hi, region, case_polys):
    z_mid = 0.5 * (z_lo + z_hi)
    try:
        loops = plane_section(m, PlaneFrame.z_plane(z_mid))
    except NoIntersectionError:
        raise ProtocolMeshMismatchError(f"{region.kind} region does not intersect the mesh") from None
    cx, cy = _union_centroid(loops)
    (x_min, _, _), (x_max, _, _) = _band_extent(m, z_lo, z_hi)
    for key in ("L", "LV", "LD", "R", "RV", "RD"):
        if key not in spec.sections:
            continue
        comp = spec.sections[key]
        # seq 1 sits next to the midline, numbering runs laterally
        if key[0] == "L":
            edges = np.linspace(cx, x_max, comp.count + 1)
        else:
            edges = np.linspace(cx, x_min, comp.count + 1)
        for fid in sorted(comp.ids, key=lambda f: f.seq):
            a, b = edges[fid.seq - 1], edges[fid.seq]
            x_mid, width = 0.5 * (a + b), abs(b - a)
            frame = PlaneFrame.x_plane(x_mid)
            try:
                sag = plane_section(m, frame)
            except NoIntersectionError:
                raise ProtocolMeshMismatchError(f"fragment {fid} plane x={x_mid:.3f} misses the mesh") from None
            # in-plane coordinates of an x-plane are (y, z)
            planes = [((0.0, z_lo), (0.0, 1.0)), ((0.0, z_hi), (0.0, -1.0))]
            if len(key) == 2:
                planes.append(((cy, 0.0), (1.0 if key[1] == "V" else -1.0, 0.0)))
            piece = _largest(clip_polygon_multi(sag, planes))
            if piece is None:
                raise ProtocolMeshMismatchError(f"fragment {fid} has no tissue in its slab")
            case_polys.append(ReferencePolygon(str(fid), frame, piece, width, region))


def build_reference_model(m: TriMesh, p: SectioningProtocol, apex_offset: float | None = None,
                          base_offset: float | None = None) -> ReferenceModel:
    """Apply protocol ``p`` to the closed mesh ``m``.

    Offsets default to the values stored in the protocol. Polygons come back
    in protocol order (apex, central slices, base).
    """
    if not is_closed(m):
        raise OpenLoopError("reference mesh must be closed")
    box = bounding_box(m)
    apex_off = p.apex.offset_mm if apex_offset is None else float(apex_offset)
    base_off = p.base.offset_mm if base_offset is None else float(base_offset)
    z_min, z_max = box.min[2], box.max[2]
    if not z_max - z_min > apex_off + base_off:
        raise ProtocolMeshMismatchError(f"mesh z-extent {z_max - z_min:.3f} mm is not larger than "
                                        f"apex+base offsets {apex_off + base_off:.3f} mm")
    polys: list[ReferencePolygon] = []
    _apex_base_polygons(m, p.apex, z_min, z_min + apex_off, Region("apex"), polys)
    lo, hi = z_min + apex_off, z_max - base_off
    thickness = (hi - lo) / p.central_count
    for spec in sorted(p.central, key=lambda s: s.index):
        z_mid = lo + (spec.index - 0.5) * thickness
        _central_polygons(m, spec, z_mid, thickness, polys)
    _apex_base_polygons(m, p.base, z_max - base_off, z_max, Region("base"), polys)
    return ReferenceModel(p.case_id, tuple(polys), box)


# ---------------------------------------------------------------------------
# export


def _polygon_record(rp: ReferencePolygon) -> dict:
    pts = rp.points3d
    n = len(pts)
    return {
        "name": rp.name,
        "points": pts.tolist(),
        "edges": [[i, (i + 1) % n] for i in range(n)],
        "thickness_mm": rp.thickness_mm,
        "region": rp.region.kind,
        "slice_index": rp.region.index,
        "frame": rp.frame.to_dict(),
    }


def serialize_reference_model(r: ReferenceModel) -> str:
    """JSON array with one ``{name, points, edges, thickness_mm, region, ...}`` per polygon.

    ``frame`` (origin and in-plane axes) is written alongside so the 2D
    outlines can be recovered exactly on re-import.
    """
    records = [_polygon_record(rp) for rp in r.polygons]
    for rec in records:
        rec["case_id"] = r.case_id
    return json.dumps(records, indent=1, sort_keys=True) + "\n"


def parse_reference_model(text: str, case_id: str | None = None) -> ReferenceModel:
    records = json.loads(text)
    polys = []
    for rec in records:
        pts = np.asarray(rec["points"], dtype=float)
        if "frame" in rec:
            frame = PlaneFrame.from_dict(rec["frame"])
        else:
            centroid = pts.mean(axis=0)
            _, _, vt = np.linalg.svd(pts - centroid)
            frame = PlaneFrame.from_normal(centroid, vt[2])
        region = Region(rec.get("region", "central"), rec.get("slice_index"))
        polys.append(ReferencePolygon(rec["name"], frame, Polygon2D(frame.project(pts)),
                                      float(rec["thickness_mm"]), region))
    if case_id is None:
        case_id = records[0].get("case_id", "case") if records else "case"
    allp = np.concatenate([rp.points3d for rp in polys]) if polys else np.zeros((1, 3))
    return ReferenceModel(case_id, tuple(polys), AABB(allp.min(axis=0), allp.max(axis=0)))


def polyline_obj(points3d: np.ndarray, name: str | None = None, offset: int = 0) -> str:
    """Closed polyline as OBJ ``v`` records plus ``l`` line elements.

    ``offset`` is the number of vertices already written to the same file.
    """
    lines = [f"o {name}"] if name else []
    lines.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in points3d)
    n = len(points3d)
    lines.extend(f"l {offset + i + 1} {offset + (i + 1) % n + 1}" for i in range(n))
    return "\n".join(lines) + "\n"


def export_reference_obj(r: ReferenceModel) -> dict[str, str]:
    """One OBJ document per reference polygon, keyed by ``<case_id>_<name>.obj``."""
    return {f"{r.case_id}_{rp.name}.obj": polyline_obj(rp.points3d, rp.name) for rp in r.polygons}
