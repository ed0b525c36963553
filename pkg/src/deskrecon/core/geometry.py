"""
Pinhole cameras, rigid camera-to-world poses and plane-sweep warping.

Conventions used everywhere in deskrecon:

* Poses map camera coordinates to world coordinates: ``X_w = R @ X_c + t``.
* Camera frame: x right, y down, z forward. Pixel ``(u, v)`` has its centre
  at integer coordinates, so a pixel grid spans ``[0, W-1] x [0, H-1]``.
* Depth is z-depth along the camera's optical axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from ..exceptions import DomainError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-6
UNIT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics for a ``width x height`` image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @classmethod
    def default(cls) -> "Intrinsics":
        return cls(fx=48.0, fy=48.0, cx=31.5, cy=23.5, width=64, height=48)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def subsampled(self, stride: int) -> "Intrinsics":
        """Intrinsics of the grid that keeps every ``stride``-th pixel."""
        if stride < 1:
            raise DomainError(f"stride must be >= 1, got {stride}")
        return Intrinsics(
            self.fx / stride,
            self.fy / stride,
            self.cx / stride,
            self.cy / stride,
            -(-self.width // stride),
            -(-self.height // stride),
        )

    def pixel_rays(self, window: Optional[tuple[int, int, int, int]] = None) -> np.ndarray:
        """Camera-frame directions ``((u-cx)/fx, (v-cy)/fy, 1)`` for a pixel window.

        Returns an ``(h, w, 3)`` array; ``window`` is ``(u0, v0, w, h)`` and
        defaults to the full image.
        """
        u0, v0, w, h = window if window is not None else (0, 0, self.width, self.height)
        u = (np.arange(u0, u0 + w, dtype=np.float64) - self.cx) / self.fx
        v = (np.arange(v0, v0 + h, dtype=np.float64) - self.cy) / self.fy
        rays = np.empty((h, w, 3), dtype=np.float64)
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        rays[..., 2] = 1.0
        return rays


class Pose:
    """Rigid camera-to-world transform. Instances are immutable."""

    __slots__ = ("_rotation", "_translation")

    def __init__(self, rotation, translation):
        rotation = np.array(rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise DomainError("pose contains non-finite values")
        error = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if error > ORTHONORMAL_TOLERANCE or np.linalg.det(rotation) <= 0:
            raise DomainError(f"rotation is not a proper rotation (orthonormality error {error:.2e})")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        self._rotation = rotation
        self._translation = translation

    @property
    def rotation(self) -> np.ndarray:
        return self._rotation

    @property
    def translation(self) -> np.ndarray:
        return self._translation

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return self._translation

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise DomainError(f"pose matrix must be 4x4, got {matrix.shape}")
        if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise DomainError(f"pose matrix bottom row must be 0 0 0 1, got {matrix[3]}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self._rotation
        out[:3, 3] = self._translation
        return out

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(
            self._rotation @ other._rotation,
            self._rotation @ other._translation + self._translation,
        )

    def inverse(self) -> "Pose":
        rt = self._rotation.T
        return Pose(rt, -rt @ self._translation)

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Apply the pose to an ``(..., 3)`` array of points."""
        return np.asarray(points, dtype=np.float64) @ self._rotation.T + self._translation

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self._rotation, other._rotation)
            and np.array_equal(self._translation, other._translation)
        )

    def __hash__(self) -> int:
        return hash((self._rotation.tobytes(), self._translation.tobytes()))

    def __repr__(self) -> str:
        return f"Pose(rotation={self._rotation.tolist()}, translation={self._translation.tolist()})"


@dataclass(frozen=True)
class CameraView:
    """A posed camera: where it is and how it images."""

    pose: Pose
    intrinsics: Intrinsics


@dataclass(frozen=True)
class Projection:
    pixel: Optional[np.ndarray]
    depth: float
    in_front: bool


@dataclass(frozen=True)
class WarpSample:
    src_pixel: np.ndarray
    src_depth: float
    valid: bool


@dataclass(frozen=True)
class Ray:
    direction: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > UNIT_TOLERANCE:
            raise DomainError(f"ray direction must be unit length, got norm {norm}")


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def invert(pose: Pose) -> Pose:
    return pose.inverse()


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform taking camera-``b`` coordinates into camera-``a`` coordinates."""
    return a.inverse().compose(b)


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise DomainError("rotation axis must be non-zero")
    return Rotation.from_rotvec(axis / norm * angle).as_matrix()


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera at ``eye`` looking at ``target`` with world ``up`` mapped to image up."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise DomainError("look_at target coincides with eye")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right_norm = np.linalg.norm(right)
    if right_norm < 1e-9:
        raise DomainError("look_at direction is parallel to up")
    right /= right_norm
    down = np.cross(forward, right)
    return Pose(np.column_stack([right, down, forward]), eye)


def pose_distance(a: Pose, b: Pose) -> float:
    """Keyframe distance ``sqrt(|t_rel| + 2/3 * tr(I - R_rel))`` between two poses."""
    rel = relative_pose(a, b)
    rotation_term = max(0.0, 3.0 - float(np.trace(rel.rotation)))
    translation_term = float(np.linalg.norm(rel.translation))
    return float(np.sqrt(translation_term + (2.0 / 3.0) * rotation_term))


def backproject_points(u, v, depth, intrinsics: Intrinsics) -> np.ndarray:
    """Vectorised backprojection to camera coordinates, shape ``(..., 3)``."""
    u, v, depth = np.broadcast_arrays(
        np.asarray(u, dtype=np.float64),
        np.asarray(v, dtype=np.float64),
        np.asarray(depth, dtype=np.float64),
    )
    out = np.empty(u.shape + (3,), dtype=np.float64)
    out[..., 0] = (u - intrinsics.cx) / intrinsics.fx * depth
    out[..., 1] = (v - intrinsics.cy) / intrinsics.fy * depth
    out[..., 2] = depth
    return out


def backproject(pixel, depth: float, intrinsics: Intrinsics) -> np.ndarray:
    if not depth > 0:
        raise DomainError(f"depth must be positive, got {depth}")
    u, v = pixel
    return backproject_points(u, v, depth, intrinsics)


def project_points(points: np.ndarray, intrinsics: Intrinsics):
    """Project camera-frame points. Returns ``(u, v, z, in_front)`` arrays.

    Pixel coordinates of points at or behind the camera are NaN.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    u = np.where(in_front, intrinsics.fx * points[..., 0] / safe_z + intrinsics.cx, np.nan)
    v = np.where(in_front, intrinsics.fy * points[..., 1] / safe_z + intrinsics.cy, np.nan)
    return u, v, z, in_front


def project(point, intrinsics: Intrinsics) -> Projection:
    u, v, z, in_front = project_points(np.asarray(point, dtype=np.float64), intrinsics)
    if not in_front:
        return Projection(pixel=None, depth=float(z), in_front=False)
    return Projection(pixel=np.array([float(u), float(v)]), depth=float(z), in_front=True)


def in_image(u, v, intrinsics: Intrinsics):
    """Mask of sub-pixel coordinates inside ``[0, W-1] x [0, H-1]``. NaN is outside."""
    with np.errstate(invalid="ignore"):
        return (
            (u >= 0)
            & (u <= intrinsics.width - 1)
            & (v >= 0)
            & (v <= intrinsics.height - 1)
        )


def warp_points(
    u,
    v,
    plane_depth,
    ref_pose: Pose,
    src_pose: Pose,
    ref_intrinsics: Intrinsics,
    src_intrinsics: Intrinsics,
):
    """Vectorised plane-sweep warp.

    Returns ``(src_u, src_v, src_depth, valid)`` with ``valid`` meaning in front
    of the source camera and inside its image.
    """
    points_ref = backproject_points(u, v, plane_depth, ref_intrinsics)
    to_src = relative_pose(src_pose, ref_pose)
    points_src = to_src.transform_points(points_ref)
    su, sv, sz, in_front = project_points(points_src, src_intrinsics)
    valid = in_front & in_image(su, sv, src_intrinsics)
    return su, sv, sz, valid


def warp_to_plane(
    ref_pixel,
    plane_depth: float,
    ref_pose: Pose,
    src_pose: Pose,
    ref_intrinsics: Intrinsics,
    src_intrinsics: Intrinsics,
) -> WarpSample:
    if not plane_depth > 0:
        raise DomainError(f"plane depth must be positive, got {plane_depth}")
    su, sv, sz, valid = warp_points(
        ref_pixel[0], ref_pixel[1], plane_depth, ref_pose, src_pose, ref_intrinsics, src_intrinsics
    )
    return WarpSample(
        src_pixel=np.array([float(su), float(sv)]), src_depth=float(sz), valid=bool(valid)
    )


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    """Normalise the last axis; raises on (near) zero vectors."""
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DomainError("cannot normalise a zero-length ray")
    return vectors / norms


def ray_direction(pixel, intrinsics: Intrinsics, pose: Pose, plane_depth: float) -> Ray:
    """Unit world-space ray from the camera centre through ``pixel`` at ``plane_depth``."""
    point = pose.transform_points(backproject(pixel, plane_depth, intrinsics))
    return Ray(direction=normalize_rows(point - pose.center))


def relative_ray_angle(r0, rn) -> float:
    """Angle in radians between two unit rays."""
    return float(np.arccos(np.clip(np.dot(np.asarray(r0), np.asarray(rn)), -1.0, 1.0)))
