"""
Dense TSDF fusion and marching-cubes mesh extraction.

Depth maps are integrated voxel-centrically: every voxel centre inside the
camera frustum is projected to its nearest pixel and the truncated signed
distance along the optical axis is folded into a running weighted average.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ..exceptions import ContractViolation, DomainError
from .geometry import Intrinsics, Pose
from .losses import DepthMap
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

logger = logging.getLogger(__name__)

DEFAULT_VOXEL_SIZE = 0.04
DEFAULT_TRUNCATION = 3 * DEFAULT_VOXEL_SIZE
DEFAULT_MAX_WEIGHT = 100.0

_EDGE_TABLE = np.asarray(EDGE_TABLE, dtype=np.int64)
_TRI_TABLE = np.full((256, 16), -1, dtype=np.int64)
for _case, _tris in enumerate(TRI_TABLE):
    _TRI_TABLE[_case, : len(_tris)] = _tris
_CORNERS = np.asarray(CORNER_OFFSETS, dtype=np.int64)
# each cube edge as (lower corner offset, axis)
_EDGE_ORIGIN = np.array(
    [np.minimum(_CORNERS[a], _CORNERS[b]) for a, b in EDGE_CORNERS], dtype=np.int64
)
_EDGE_AXIS = np.array(
    [int(np.argmax(np.abs(_CORNERS[a] - _CORNERS[b]))) for a, b in EDGE_CORNERS], dtype=np.int64
)


@dataclass(eq=False)
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    tsdf: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.voxel_size <= 0:
            raise DomainError(f"voxel size must be positive, got {self.voxel_size}")
        if self.tsdf.shape != tuple(self.dims) or self.weight.shape != tuple(self.dims):
            raise ContractViolation("tsdf and weight grids must match the volume dims")

    @classmethod
    def create(cls, origin, dims, voxel_size: float = DEFAULT_VOXEL_SIZE) -> "TsdfVolume":
        dims = tuple(int(d) for d in dims)
        if min(dims) < 2:
            raise DomainError(f"volume needs at least 2 voxels per axis, got {dims}")
        return cls(
            origin=np.asarray(origin, dtype=np.float64),
            voxel_size=float(voxel_size),
            dims=dims,
            tsdf=np.ones(dims, dtype=np.float32),
            weight=np.zeros(dims, dtype=np.float32),
        )

    @classmethod
    def for_room(cls, extents, voxel_size: float = DEFAULT_VOXEL_SIZE, margin: int = 2) -> "TsdfVolume":
        """Grid covering ``[0, extents]`` plus ``margin`` voxels on every side."""
        extents = np.asarray(extents, dtype=np.float64)
        origin = np.full(3, -margin * voxel_size)
        dims = np.ceil(extents / voxel_size).astype(int) + 2 * margin + 1
        return cls.create(origin, dims, voxel_size)

    def axis_coordinates(self, axis: int, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        stop = self.dims[axis] if stop is None else stop
        return self.origin[axis] + np.arange(start, stop) * self.voxel_size

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(
            self.origin.copy(), self.voxel_size, self.dims, self.tsdf.copy(), self.weight.copy()
        )

    @property
    def observed_fraction(self) -> float:
        return float((self.weight > 0).mean())


@dataclass(frozen=True)
class IntegrationResult:
    volume: TsdfVolume
    elapsed_ms: float
    voxels_updated: int


def _frustum_block(vol: TsdfVolume, pose: Pose, k: Intrinsics, far: float):
    """Voxel index ranges of the axis-aligned box around the camera frustum."""
    corners = np.array(
        [[0.0, 0.0], [k.width - 1.0, 0.0], [0.0, k.height - 1.0], [k.width - 1.0, k.height - 1.0]]
    )
    rays = np.column_stack(
        [(corners[:, 0] - k.cx) / k.fx, (corners[:, 1] - k.cy) / k.fy, np.ones(4)]
    )
    # half a pixel beyond the image, since lookups round to the nearest pixel
    rays[:, :2] *= 1.0 + 1.0 / min(k.width, k.height)
    points = np.vstack([pose.center, pose.transform_points(rays * far)])
    lo = np.floor((points.min(axis=0) - vol.origin) / vol.voxel_size).astype(int)
    hi = np.ceil((points.max(axis=0) - vol.origin) / vol.voxel_size).astype(int) + 1
    lo = np.clip(lo, 0, vol.dims)
    hi = np.clip(hi, 0, vol.dims)
    return lo, hi


def tsdf_integrate(
    vol: TsdfVolume,
    depth: DepthMap,
    pose: Pose,
    intrinsics: Intrinsics,
    truncation: float = DEFAULT_TRUNCATION,
    max_weight: float = DEFAULT_MAX_WEIGHT,
) -> IntegrationResult:
    """Fold one depth map into ``vol`` in place and report the wall-clock cost."""
    start = time.perf_counter()
    if truncation < vol.voxel_size:
        raise DomainError(f"truncation {truncation} is smaller than the voxel size {vol.voxel_size}")
    if depth.shape != intrinsics.shape:
        raise ContractViolation(f"depth map {depth.shape} does not match intrinsics {intrinsics.shape}")
    if not depth.valid.any():
        return IntegrationResult(vol, (time.perf_counter() - start) * 1e3, 0)

    far = float(depth.depth[depth.valid].max()) + truncation
    lo, hi = _frustum_block(vol, pose, intrinsics, far)
    if np.any(hi <= lo):
        return IntegrationResult(vol, (time.perf_counter() - start) * 1e3, 0)

    xs = vol.axis_coordinates(0, lo[0], hi[0])[:, None, None]
    ys = vol.axis_coordinates(1, lo[1], hi[1])[None, :, None]
    zs = vol.axis_coordinates(2, lo[2], hi[2])[None, None, :]
    # world -> camera is R^T (X - t)
    r = pose.rotation
    dx, dy, dz = xs - pose.center[0], ys - pose.center[1], zs - pose.center[2]
    cam_x = r[0, 0] * dx + r[1, 0] * dy + r[2, 0] * dz
    cam_y = r[0, 1] * dx + r[1, 1] * dy + r[2, 1] * dz
    cam_z = r[0, 2] * dx + r[1, 2] * dy + r[2, 2] * dz

    k = intrinsics
    in_front = cam_z > 1e-6
    safe_z = np.where(in_front, cam_z, 1.0)
    u = np.rint(k.fx * cam_x / safe_z + k.cx)
    v = np.rint(k.fy * cam_y / safe_z + k.cy)
    candidate = in_front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)

    idx = np.nonzero(candidate)
    pixel = v[idx].astype(np.int64) * k.width + u[idx].astype(np.int64)
    d = depth.depth.ravel()[pixel]
    ok = depth.valid.ravel()[pixel]
    sdf = d - cam_z[idx]
    ok &= sdf >= -truncation
    idx = tuple(i[ok] for i in idx)
    sdf = sdf[ok]

    tsdf_block = vol.tsdf[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    weight_block = vol.weight[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    tsdf_new = np.clip(sdf / truncation, -1.0, 1.0)
    w = weight_block[idx].astype(np.float64)
    tsdf_block[idx] = (w * tsdf_block[idx] + tsdf_new) / (w + 1.0)
    weight_block[idx] = np.minimum(w + 1.0, max_weight)

    elapsed_ms = (time.perf_counter() - start) * 1e3
    return IntegrationResult(vol, elapsed_ms, int(sdf.size))


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise ContractViolation("one normal per vertex is required")
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ContractViolation("triangle indices out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def face_areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=-1)

    def centroids(self) -> np.ndarray:
        return self.corners().mean(axis=1)

    def submesh(self, keep: np.ndarray) -> "TriangleMesh":
        """Mesh of the selected triangles with unused vertices dropped."""
        triangles = self.triangles[np.asarray(keep, dtype=bool)]
        used, remap = np.unique(triangles, return_inverse=True)
        normals = self.normals[used] if self.normals is not None else None
        return TriangleMesh(self.vertices[used], remap.reshape(-1, 3), normals)

    def edges(self) -> np.ndarray:
        e = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return int(len(used) - len(self.edges()) + len(self.triangles))


def _field_normals(tsdf: np.ndarray, points_index: np.ndarray) -> np.ndarray:
    """Normalised central-difference gradient of the field at the nearest voxel."""
    idx = np.clip(np.rint(points_index).astype(np.int64), 0, np.array(tsdf.shape) - 1)
    grad = np.zeros((len(idx), 3))
    for axis in range(3):
        up = idx.copy()
        down = idx.copy()
        up[:, axis] = np.minimum(up[:, axis] + 1, tsdf.shape[axis] - 1)
        down[:, axis] = np.maximum(down[:, axis] - 1, 0)
        grad[:, axis] = tsdf[tuple(up.T)].astype(np.float64) - tsdf[tuple(down.T)]
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    return np.where(norms > 0, grad / np.where(norms > 0, norms, 1.0), 0.0)


def marching_cubes(vol: TsdfVolume) -> TriangleMesh:
    """Zero isosurface of the tsdf with shared vertices on shared cube edges.

    Cubes with any unobserved corner are skipped. Vertex normals follow the
    field gradient (pointing into free space) and triangle winding agrees.
    """
    values = vol.tsdf.astype(np.float64)
    observed = vol.weight > 0
    nx, ny, nz = vol.dims
    cube_shape = (nx - 1, ny - 1, nz - 1)
    case = np.zeros(cube_shape, dtype=np.int64)
    complete = np.ones(cube_shape, dtype=bool)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        sl = (slice(ox, ox + nx - 1), slice(oy, oy + ny - 1), slice(oz, oz + nz - 1))
        case |= (values[sl] < 0).astype(np.int64) << bit
        complete &= observed[sl]
    case = np.where(complete, case, 0)
    active = np.nonzero(_EDGE_TABLE[case] != 0)
    if active[0].size == 0:
        return TriangleMesh.empty()

    base = np.stack(active, axis=1)
    cases = case[active]
    # global id of every cube edge: 3 * (linear index of its lower corner) + axis
    edge_points = base[:, None, :] + _EDGE_ORIGIN[None, :, :]
    edge_ids = np.ravel_multi_index(tuple(edge_points.transpose(2, 0, 1)), vol.dims) * 3 + _EDGE_AXIS[None, :]

    tri_edges = _TRI_TABLE[cases][:, :15].reshape(-1, 5, 3)
    has_tri = tri_edges[..., 0] >= 0
    cube_of_tri = np.broadcast_to(np.arange(len(cases))[:, None], has_tri.shape)[has_tri]
    local = tri_edges[has_tri]
    tri_ids = edge_ids[cube_of_tri[:, None], local]

    unique_ids, faces = np.unique(tri_ids, return_inverse=True)
    faces = faces.reshape(-1, 3)
    axis = unique_ids % 3
    lower = np.stack(np.unravel_index(unique_ids // 3, vol.dims), axis=1)
    upper = lower.copy()
    upper[np.arange(len(axis)), axis] += 1
    v0 = values[tuple(lower.T)]
    v1 = values[tuple(upper.T)]
    t = v0 / (v0 - v1)
    points_index = lower.astype(np.float64)
    points_index[np.arange(len(axis)), axis] += t
    vertices = vol.origin + points_index * vol.voxel_size
    normals = _field_normals(vol.tsdf, points_index)

    mesh = TriangleMesh(vertices, faces, normals)
    keep = mesh.face_areas() > 1e-12 * vol.voxel_size**2
    if not keep.all():
        mesh = mesh.submesh(keep)
    corners = mesh.corners()
    geometric = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    flip = np.sum(geometric * mesh.normals[mesh.triangles].sum(axis=1), axis=-1) < 0
    mesh.triangles[flip] = mesh.triangles[flip][:, [0, 2, 1]]
    logger.debug(f"Extracted mesh with {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return mesh


@dataclass(frozen=True)
class LatencyStats:
    """Per-frame integration latency in milliseconds."""

    samples: tuple[tuple[int, float], ...]
    trajectory_frames: int = 0

    @property
    def values(self) -> np.ndarray:
        return np.array([ms for _, ms in self.samples], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if self.samples else 0.0

    @property
    def p50(self) -> float:
        return float(np.percentile(self.values, 50)) if self.samples else 0.0

    @property
    def p95(self) -> float:
        return float(np.percentile(self.values, 95)) if self.samples else 0.0

    @property
    def amortized(self) -> float:
        """Integration time spread over every trajectory frame, keyframe or not."""
        frames = self.trajectory_frames or len(self.samples)
        return float(self.values.sum() / frames) if frames else 0.0

    def summary(self) -> dict[str, float]:
        return {
            "frames": float(len(self.samples)),
            "mean_ms": self.mean,
            "p50_ms": self.p50,
            "p95_ms": self.p95,
            "amortized_ms": self.amortized,
        }

    def as_lines(self) -> str:
        return "".join(f"{frame_id} {ms:.4f}\n" for frame_id, ms in self.samples)


@dataclass(frozen=True)
class FusionInput:
    frame_id: int
    depth: DepthMap
    pose: Pose
    intrinsics: Intrinsics


@dataclass(frozen=True, eq=False)
class FusionResult:
    mesh: TriangleMesh
    volume: TsdfVolume
    latency: LatencyStats = field(default_factory=lambda: LatencyStats(()))


class TsdfFusion:
    """Incremental integration into one volume, recording per-frame latency."""

    def __init__(
        self,
        volume: TsdfVolume,
        truncation: float = DEFAULT_TRUNCATION,
        max_weight: float = DEFAULT_MAX_WEIGHT,
        trajectory_frames: int = 0,
    ):
        self.volume = volume
        self.truncation = truncation
        self.max_weight = max_weight
        self.trajectory_frames = trajectory_frames
        self.samples: list[tuple[int, float]] = []
        self.voxels_updated = 0

    def integrate(self, item: FusionInput) -> IntegrationResult:
        result = tsdf_integrate(
            self.volume, item.depth, item.pose, item.intrinsics, self.truncation, self.max_weight
        )
        self.samples.append((item.frame_id, result.elapsed_ms))
        self.voxels_updated += result.voxels_updated
        logger.debug(
            f"Integrated frame {item.frame_id}: {result.voxels_updated} voxels in {result.elapsed_ms:.2f} ms"
        )
        return result

    @property
    def latency(self) -> LatencyStats:
        return LatencyStats(tuple(self.samples), self.trajectory_frames)

    def finish(self) -> FusionResult:
        """Mesh of everything integrated so far; empty when nothing was."""
        latency = self.latency
        mesh = marching_cubes(self.volume) if self.samples else TriangleMesh.empty()
        logger.info(
            f"Fused {len(self.samples)} frames: mean {latency.mean:.2f} ms, "
            f"p95 {latency.p95:.2f} ms, {len(mesh.triangles)} triangles"
        )
        return FusionResult(mesh=mesh, volume=self.volume, latency=latency)


def fuse_pipeline(
    frames: Iterable[FusionInput],
    volume: TsdfVolume,
    truncation: float = DEFAULT_TRUNCATION,
    max_weight: float = DEFAULT_MAX_WEIGHT,
    trajectory_frames: int = 0,
) -> FusionResult:
    """Integrate a stream of posed depth maps, then extract the mesh."""
    fusion = TsdfFusion(volume, truncation, max_weight, trajectory_frames)
    for item in frames:
        fusion.integrate(item)
    return fusion.finish()


def bench_integration(
    depths: Sequence[FusionInput],
    volume: TsdfVolume,
    truncation: float = DEFAULT_TRUNCATION,
    max_weight: float = DEFAULT_MAX_WEIGHT,
    repeats: int = 1,
) -> LatencyStats:
    """Time integration of the same frames ``repeats`` times into fresh copies."""
    samples = []
    for _ in range(repeats):
        scratch = volume.copy()
        for item in depths:
            result = tsdf_integrate(scratch, item.depth, item.pose, item.intrinsics, truncation, max_weight)
            samples.append((item.frame_id, result.elapsed_ms))
    return LatencyStats(tuple(samples), len(depths) * repeats)
