"""Plane frames, bounding boxes and 3D affine transforms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ArgumentError, SingularTransformError


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PlaneFrame:
    """Orthonormal 2D coordinate system embedded in 3D.

    ``project`` maps world points to in-plane ``(u, v)`` coordinates and
    ``lift`` maps them back. The plane normal is ``u x v``.
    """

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin))
        object.__setattr__(self, "u", _frozen(self.u))
        object.__setattr__(self, "v", _frozen(self.v))
        if (abs(np.linalg.norm(self.u) - 1) > 1e-12 or abs(np.linalg.norm(self.v) - 1) > 1e-12
                or abs(np.dot(self.u, self.v)) > 1e-12):
            raise ArgumentError("plane frame basis must be orthonormal")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    def project(self, points) -> np.ndarray:
        d = np.asarray(points, dtype=float) - self.origin
        return np.stack([d @ self.u, d @ self.v], axis=-1)

    def lift(self, points2d) -> np.ndarray:
        q = np.asarray(points2d, dtype=float)
        return self.origin + q[..., :1] * self.u + q[..., 1:2] * self.v

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.origin) @ self.normal

    @classmethod
    def z_plane(cls, z: float) -> PlaneFrame:
        """Transverse plane at height ``z``; in-plane coords are world (x, y), normal +z."""
        return cls([0.0, 0.0, z], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])

    @classmethod
    def x_plane(cls, x: float) -> PlaneFrame:
        """Sagittal plane at ``x``; in-plane coords are world (y, z), normal +x."""
        return cls([x, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])

    @classmethod
    def from_normal(cls, origin, normal) -> PlaneFrame:
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        helper = np.eye(3)[np.argmin(np.abs(n))]
        u = np.cross(helper, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return cls(origin, u, v)

    def to_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "u": self.u.tolist(), "v": self.v.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> PlaneFrame:
        return cls(d["origin"], d["u"], d["v"])

    def __eq__(self, other):
        return (isinstance(other, PlaneFrame) and np.array_equal(self.origin, other.origin)
                and np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AABB:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _frozen(self.min))
        object.__setattr__(self, "max", _frozen(self.max))
        if (self.min > self.max).any():
            raise ArgumentError("AABB min must be <= max componentwise")

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}


@dataclass(frozen=True, eq=False)
class AffineTransform3D:
    """``p -> linear @ p + translation``."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", _frozen(np.reshape(self.linear, (3, 3))))
        object.__setattr__(self, "translation", _frozen(np.reshape(self.translation, 3)))

    @classmethod
    def identity(cls) -> AffineTransform3D:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def scaling(cls, factors) -> AffineTransform3D:
        f = np.broadcast_to(np.asarray(factors, dtype=float), (3,))
        return cls(np.diag(f), np.zeros(3))

    @classmethod
    def translation_by(cls, offset) -> AffineTransform3D:
        return cls(np.eye(3), offset)

    @classmethod
    def from_euler_deg(cls, rx: float, ry: float, rz: float) -> AffineTransform3D:
        """Rotation about x, then y, then z (extrinsic), angles in degrees."""
        ax, ay, az = np.radians([rx, ry, rz])
        cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
        rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return cls(rot_z @ rot_y @ rot_x, np.zeros(3))

    def __matmul__(self, other: AffineTransform3D) -> AffineTransform3D:
        """Composition: ``(self @ other)(p) == self(other(p))``."""
        return AffineTransform3D(self.linear @ other.linear,
                                 self.linear @ other.translation + self.translation)

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.linear))

    def check_invertible(self) -> None:
        if not np.isfinite(self.linear).all() or abs(self.determinant) < 1e-12:
            raise SingularTransformError(f"transform is singular (det={self.determinant:.3g})")

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.linear.T + self.translation
