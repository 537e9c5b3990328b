"""Meshes, planar polygons, frames and mesh file IO."""
from .frame import AABB, AffineTransform3D, PlaneFrame
from .mesh import (TriMesh, apply_transform, bounding_box, clean_mesh, concatenate, is_closed,
                   mesh_volume)
from .meshio import load_mesh, read_mesh, write_obj, write_ply_ascii, write_stl_binary
from .polygon import (Polygon2D, is_simple, points_in_polygon, polygon_area, polygon_centroid,
                      polygon_perimeter, signed_area)
from .shapes import box, generic_prostate_model, uv_ellipsoid

__all__ = [
    "AABB", "AffineTransform3D", "PlaneFrame", "TriMesh", "apply_transform", "bounding_box",
    "clean_mesh", "concatenate", "is_closed", "mesh_volume", "load_mesh", "read_mesh",
    "write_obj", "write_ply_ascii", "write_stl_binary", "Polygon2D", "is_simple",
    "points_in_polygon", "polygon_area", "polygon_centroid", "polygon_perimeter", "signed_area",
    "box", "generic_prostate_model", "uv_ellipsoid",
]
