"""OBJ / PLY / STL reading and OBJ / STL writing."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import EmptyMeshError, FormatError
from .mesh import WELD_TOL, TriMesh, clean_mesh

FORMATS = ("obj", "ply", "stl", "auto")


def _fan(face: list[int]) -> list[list[int]]:
    return [[face[0], face[k], face[k + 1]] for k in range(1, len(face) - 1)]


def _parse_obj(text: str) -> TriMesh:
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise FormatError("vertex record needs 3 coordinates", lineno)
            try:
                vertices.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise FormatError(f"bad vertex coordinate in {raw!r}", lineno) from None
        elif tag == "f":
            if len(parts) < 4:
                raise FormatError("face record needs at least 3 vertices", lineno)
            idx = []
            for token in parts[1:]:
                try:
                    i = int(token.split("/", 1)[0])
                except ValueError:
                    raise FormatError(f"bad face index {token!r}", lineno) from None
                if i == 0:
                    raise FormatError("OBJ indices are 1-based", lineno)
                i = i - 1 if i > 0 else len(vertices) + i
                if not 0 <= i < len(vertices):
                    raise FormatError(f"face index {token} out of range", lineno)
                idx.append(i)
            faces.extend(_fan(idx))
        # normals, texcoords, groups, materials, lines: ignored
    if not faces:
        raise EmptyMeshError("OBJ contains no faces")
    return clean_mesh(vertices, faces)


def _parse_ply(text: str) -> TriMesh:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("missing 'ply' magic", 1)
    n_vertex = n_face = None
    vertex_props: list[str] = []
    current = None
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise FormatError("only ASCII PLY is supported", lineno)
        elif parts[0] == "element":
            if len(parts) != 3:
                raise FormatError("bad element declaration", lineno)
            current = parts[1]
            try:
                count = int(parts[2])
            except ValueError:
                raise FormatError("bad element count", lineno) from None
            if current == "vertex":
                n_vertex = count
            elif current == "face":
                n_face = count
        elif parts[0] == "property" and current == "vertex":
            vertex_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or n_vertex is None or n_face is None:
        raise FormatError("incomplete PLY header")
    if not {"x", "y", "z"} <= set(vertex_props):
        raise FormatError("PLY vertex element lacks x/y/z")
    ix, iy, iz = (vertex_props.index(c) for c in "xyz")
    body = [(i, ln.split()) for i, ln in enumerate(lines[body_start:], start=body_start + 1)]
    body = [(i, p) for i, p in body if p]
    if len(body) < n_vertex + n_face:
        raise FormatError("PLY body shorter than declared element counts")
    vertices, faces = [], []
    for lineno, parts in body[:n_vertex]:
        try:
            vals = [float(x) for x in parts]
            vertices.append([vals[ix], vals[iy], vals[iz]])
        except (ValueError, IndexError):
            raise FormatError("bad vertex record", lineno) from None
    for lineno, parts in body[n_vertex:n_vertex + n_face]:
        try:
            k = int(parts[0])
            idx = [int(x) for x in parts[1:1 + k]]
        except (ValueError, IndexError):
            raise FormatError("bad face record", lineno) from None
        if k < 3 or len(idx) != k or min(idx) < 0 or max(idx) >= n_vertex:
            raise FormatError("bad face record", lineno)
        faces.extend(_fan(idx))
    if not faces:
        raise EmptyMeshError("PLY contains no faces")
    return clean_mesh(vertices, faces)


def _is_binary_stl(data: bytes) -> bool:
    if len(data) < 84:
        return False
    (n,) = struct.unpack_from("<I", data, 80)
    return len(data) == 84 + 50 * n


def _parse_stl(data: bytes) -> TriMesh:
    if _is_binary_stl(data):
        (n,) = struct.unpack_from("<I", data, 80)
        if n == 0:
            raise EmptyMeshError("STL contains no facets")
        rec = np.frombuffer(data, dtype=np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)),
                                                  ("attr", "<u2")]), count=n, offset=84)
        corners = rec["v"].astype(float).reshape(-1, 3)
    else:
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError:
            raise FormatError("neither binary nor ASCII STL") from None
        corners = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            parts = raw.split()
            if parts and parts[0] == "vertex":
                try:
                    corners.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise FormatError("bad vertex record", lineno) from None
                if len(parts) != 4:
                    raise FormatError("vertex record needs 3 coordinates", lineno)
        if not corners:
            if "solid" not in text[:256]:
                raise FormatError("not an STL document")
            raise EmptyMeshError("STL contains no facets")
        if len(corners) % 3:
            raise FormatError("facet with other than 3 vertices")
        corners = np.array(corners)
    tris = np.arange(len(corners)).reshape(-1, 3)
    return clean_mesh(corners, tris, weld_tol=WELD_TOL)


def detect_format(data: bytes) -> str:
    head = data[:512].lstrip()
    if head.startswith(b"ply"):
        return "ply"
    if _is_binary_stl(data):
        return "stl"
    if head.startswith(b"solid") and b"facet" in data[:4096]:
        return "stl"
    return "obj"


def load_mesh(data: bytes | str, format_hint: str = "auto") -> TriMesh:
    """Parse mesh bytes.

    Polygonal faces are fan-triangulated, STL corners are welded at 1e-6 mm
    and degenerate triangles (area < 1e-9 mm^2) are dropped.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    fmt = format_hint.lower()
    if fmt not in FORMATS:
        raise FormatError(f"unknown mesh format {format_hint!r}")
    if fmt == "auto":
        fmt = detect_format(data)
    if fmt == "stl":
        return _parse_stl(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{fmt.upper()} input is not text (binary PLY is unsupported)") from None
    return _parse_ply(text) if fmt == "ply" else _parse_obj(text)


def read_mesh(path: str | Path) -> TriMesh:
    path = Path(path)
    hint = path.suffix.lstrip(".").lower()
    return load_mesh(path.read_bytes(), hint if hint in FORMATS else "auto")


def write_obj(m: TriMesh, header: str | None = None) -> str:
    """OBJ text with ``v`` and 1-based ``f`` records, 9 significant digits."""
    out = []
    if header:
        out.extend(f"# {line}" for line in header.splitlines())
    out.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in m.vertices)
    out.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in m.triangles)
    return "\n".join(out) + "\n"


def write_stl_binary(m: TriMesh) -> bytes:
    tri = m.vertices[m.triangles]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)
    rec = np.zeros(len(tri), dtype=np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)),
                                             ("attr", "<u2")]))
    rec["normal"] = normals
    rec["v"] = tri
    return b"binary stl".ljust(80, b" ") + struct.pack("<I", len(tri)) + rec.tobytes()


def write_ply_ascii(m: TriMesh) -> str:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(m.vertices)}",
             "property float x", "property float y", "property float z",
             f"element face {len(m.triangles)}", "property list uchar int vertex_indices",
             "end_header"]
    lines.extend(f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in m.vertices)
    lines.extend(f"3 {a} {b} {c}" for a, b, c in m.triangles)
    return "\n".join(lines) + "\n"
