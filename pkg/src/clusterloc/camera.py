"""Pinhole camera poses and projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    principal_point: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", tuple(float(x) for x in self.principal_point))
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")

    @property
    def cx(self) -> float:
        return self.principal_point[0]

    @property
    def cy(self) -> float:
        return self.principal_point[1]


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rotation plus camera center; ``x_cam = R (X - C)``."""

    rotation: np.ndarray
    center: np.ndarray
    focal: float
    principal_point: tuple[float, float]

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        C = np.array(self.center, dtype=np.float64).reshape(3)
        pp = tuple(float(x) for x in self.principal_point)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", C)
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", pp)
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(C))):
            raise ValueError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant")

    @classmethod
    def from_intrinsics(cls, rotation, center, intrinsics: Intrinsics) -> CameraPose:
        return cls(rotation, center, intrinsics.focal, intrinsics.principal_point)

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.principal_point)

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.center

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.center) @ self.rotation.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project ``(n, 3)`` world points.

        Returns ``(pixels, in_front)``; pixels of points with non-positive
        depth are NaN.
        """
        Xc = self.to_camera(np.atleast_2d(points))
        z = Xc[:, 2]
        in_front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * Xc[:, 0] / z + self.principal_point[0]
            v = self.focal * Xc[:, 1] / z + self.principal_point[1]
        px = np.stack([u, v], axis=1)
        px[~in_front] = np.nan
        return px, in_front

    def reproject(self, point) -> np.ndarray | None:
        """Pixel of a single world point, or ``None`` when it is behind the camera."""
        px, ok = self.project(np.asarray(point, dtype=np.float64).reshape(1, 3))
        return px[0] if ok[0] else None

    def quaternion(self) -> np.ndarray:
        """Rotation as a unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([w, x, y, z])
        return -q if q[0] < 0 else q

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "center": self.center.tolist(),
            "focal": self.focal,
            "principal_point": list(self.principal_point),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraPose:
        return cls(np.array(d["rotation"]), np.array(d["center"]), d["focal"], d["principal_point"])

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.center, other.center)
            and self.focal == other.focal
            and self.principal_point == other.principal_point
        )

    __hash__ = None


def reprojection_errors(pose: CameraPose, pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Euclidean pixel residuals; points behind the camera get ``inf``."""
    proj, in_front = pose.project(points)
    err = np.linalg.norm(proj - np.asarray(pixels, dtype=np.float64), axis=1)
    err[~in_front] = np.inf
    return err


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation with +z toward ``target`` and image y pointing down."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-12:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def rotation_error(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle between two rotations, radians."""
    # rotvec norm keeps precision for tiny angles where arccos(trace) does not
    return float(np.linalg.norm(Rotation.from_matrix(R1 @ R2.T).as_rotvec()))


def center_error(pose: CameraPose, reference: CameraPose) -> float:
    return float(np.linalg.norm(pose.center - reference.center))
