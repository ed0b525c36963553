"""
Procedural rooms, camera trajectories and an exact ray-casting oracle.

A scene is a bounded room of five textured rectangles (floor, ceiling and three
walls; the -z side is open) plus boxes and spheres. Depth, normals and texture
come from closed-form ray intersections, so they are ground truth to machine
precision and independent of any estimator under test.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from ..exceptions import DomainError, SceneError
from .geometry import CameraView, Intrinsics, Pose, look_at, rotation_about
from .keyframing import Frame, Trajectory
from .losses import DepthMap, NormalMap

logger = logging.getLogger(__name__)

HIT_EPSILON = 1e-9
MAX_PLACEMENT_ATTEMPTS = 10_000
WAVES_PER_CHANNEL = 6
LUMINANCE_CHANNELS = 3
MOTIONS = ("orbit", "line", "jitter")


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``x[axis] == offset`` bounded on the other two axes."""

    axis: int
    offset: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    texture_seed: int


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    texture_seed: int


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture_seed: int


Primitive = Union[Rect, Box, Sphere]


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    room_extents: tuple[float, float, float] = (5.0, 3.0, 5.0)
    n_boxes: int = 4
    n_spheres: int = 3
    texture_correlation_length: float = 0.25
    occluder_density: float = 0.0
    keepout_radius: float = 1.0

    def __post_init__(self):
        if min(self.room_extents) <= 0:
            raise DomainError(f"room extents must be positive, got {self.room_extents}")
        if self.n_boxes < 0 or self.n_spheres < 0:
            raise DomainError("object counts must be non-negative")
        if self.texture_correlation_length <= 0:
            raise DomainError("texture correlation length must be positive")
        if not 0.0 <= self.occluder_density <= 1.0:
            raise DomainError(f"occluder density must be in [0, 1], got {self.occluder_density}")


@dataclass(frozen=True, eq=False)
class Scene:
    primitives: tuple[Primitive, ...]
    correlation_length: float = 0.25
    room_extents: Optional[tuple[float, float, float]] = None
    seed: int = 0

    def contains(self, point) -> bool:
        """True when ``point`` lies in the room and outside every solid object."""
        p = np.asarray(point, dtype=np.float64)
        if self.room_extents is not None:
            if np.any(p <= 0) or np.any(p >= np.asarray(self.room_extents)):
                return False
        for prim in self.primitives:
            if isinstance(prim, Sphere):
                if np.linalg.norm(p - np.asarray(prim.center)) <= prim.radius:
                    return False
            elif isinstance(prim, Box):
                if np.all(p >= np.asarray(prim.lo)) and np.all(p <= np.asarray(prim.hi)):
                    return False
        return True

    def texture(self, points: np.ndarray, primitive_ids: np.ndarray, channels: int) -> np.ndarray:
        """Procedural texture of ``channels`` values at surface points."""
        out = np.zeros(points.shape[:-1] + (channels,))
        for index in np.unique(primitive_ids[primitive_ids >= 0]):
            sel = primitive_ids == index
            seed = self.primitives[int(index)].texture_seed
            out[sel] = spectral_texture(points[sel], seed, channels, self.correlation_length)
        return out

    def luminance(self, points: np.ndarray, primitive_ids: np.ndarray) -> np.ndarray:
        """Grey level in ``[0, 1]``, independent of the feature channels."""
        out = np.zeros(points.shape[:-1])
        for index in np.unique(primitive_ids[primitive_ids >= 0]):
            sel = primitive_ids == index
            seed = self.primitives[int(index)].texture_seed + 7919
            field_values = spectral_texture(
                points[sel], seed, LUMINANCE_CHANNELS, 0.5 * self.correlation_length
            )
            out[sel] = 0.5 + 0.45 * np.tanh(field_values.sum(axis=-1) / np.sqrt(LUMINANCE_CHANNELS))
        return out


@lru_cache(maxsize=256)
def _spectral_basis(seed: int, channels: int, correlation_length: float):
    rng = np.random.default_rng([seed, channels])
    directions = rng.normal(size=(channels, WAVES_PER_CHANNEL, 3))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    # isotropic waves of wavenumber pi/L decorrelate at distance L
    frequencies = directions * (np.pi / correlation_length)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(channels, WAVES_PER_CHANNEL))
    return frequencies, phases


def spectral_texture(points: np.ndarray, seed: int, channels: int, correlation_length: float):
    """Smooth random field: a sum of random-phase plane waves per channel."""
    frequencies, phases = _spectral_basis(int(seed), int(channels), float(correlation_length))
    arg = np.einsum("...k,cwk->...cw", points, frequencies) + phases
    return np.cos(arg).sum(axis=-1) * np.sqrt(2.0 / WAVES_PER_CHANNEL)


@dataclass(frozen=True, eq=False)
class RayHits:
    depth: np.ndarray
    valid: np.ndarray
    primitive: np.ndarray
    points: np.ndarray
    normals: np.ndarray


def _intersect_rect(rect: Rect, origin, dirs):
    a = rect.axis
    others = [i for i in range(3) if i != a]
    da = dirs[..., a]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rect.offset - origin[a]) / da
    t = np.where(np.abs(da) > 1e-15, t, np.inf)
    with np.errstate(invalid="ignore"):
        hit_points = origin + t[..., None] * dirs
    inside = np.ones(t.shape, dtype=bool)
    for k, axis in enumerate(others):
        coord = np.where(np.isfinite(t), hit_points[..., axis], np.nan)
        inside &= (coord >= rect.lo[k] - 1e-12) & (coord <= rect.hi[k] + 1e-12)
    t = np.where(inside & (t > HIT_EPSILON), t, np.inf)
    normal = np.zeros(dirs.shape)
    normal[..., a] = np.where(da > 0, -1.0, 1.0)
    return t, normal


def _intersect_sphere(sphere: Sphere, origin, dirs):
    oc = origin - np.asarray(sphere.center)
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * (dirs @ oc)
    c = float(oc @ oc) - sphere.radius**2
    disc = b * b - 4.0 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = (-b - root) / (2.0 * a)
    t_far = (-b + root) / (2.0 * a)
    t = np.where(t_near > HIT_EPSILON, t_near, t_far)
    t = np.where((disc >= 0) & (t > HIT_EPSILON), t, np.inf)
    points = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    normal = (points - np.asarray(sphere.center)) / sphere.radius
    return t, normal


def _intersect_box(box: Box, origin, dirs):
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    safe = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
    t0 = (lo - origin) / safe
    t1 = (hi - origin) / safe
    t_min = np.minimum(t0, t1)
    t_max = np.maximum(t0, t1)
    t_near = t_min.max(axis=-1)
    t_far = t_max.min(axis=-1)
    entry_axis = t_min.argmax(axis=-1)
    hit = (t_near <= t_far) & (t_near > HIT_EPSILON)
    t = np.where(hit, t_near, np.inf)
    normal = np.zeros(dirs.shape)
    axis_dir = np.take_along_axis(dirs, entry_axis[..., None], axis=-1)[..., 0]
    np.put_along_axis(
        normal, entry_axis[..., None], np.where(axis_dir > 0, -1.0, 1.0)[..., None], axis=-1
    )
    return t, normal


_INTERSECTORS = {Rect: _intersect_rect, Sphere: _intersect_sphere, Box: _intersect_box}


def cast_rays(scene: Scene, pose: Pose, intrinsics: Intrinsics) -> RayHits:
    """Closest-hit ray cast of every pixel of a posed camera.

    Rays are ``R @ ((u-cx)/fx, (v-cy)/fy, 1)`` so the hit parameter is the
    z-depth of the hit point. Normals are in world coordinates, facing the ray.
    """
    dirs = intrinsics.pixel_rays() @ pose.rotation.T
    origin = pose.center
    best_t = np.full(dirs.shape[:-1], np.inf)
    best_id = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    best_normal = np.zeros(dirs.shape)
    for index, prim in enumerate(scene.primitives):
        t, normal = _INTERSECTORS[type(prim)](prim, origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, index, best_id)
        best_normal = np.where(closer[..., None], normal, best_normal)
    valid = np.isfinite(best_t)
    depth = np.where(valid, best_t, 0.0)
    points = origin + depth[..., None] * dirs
    facing = np.sum(best_normal * dirs, axis=-1) > 0
    best_normal = np.where(facing[..., None], -best_normal, best_normal)
    return RayHits(depth=depth, valid=valid, primitive=best_id, points=points, normals=best_normal)


@dataclass(frozen=True, eq=False)
class RenderedView:
    pose: Pose
    intrinsics: Intrinsics
    image: np.ndarray
    depth: DepthMap
    normals: NormalMap
    hits: RayHits = field(repr=False)

    @property
    def view(self) -> CameraView:
        return CameraView(self.pose, self.intrinsics)


def render_depth(scene: Scene, view: CameraView) -> RenderedView:
    """Exact depth, camera-frame normals and luminance for ``view``."""
    if not scene.contains(view.pose.center):
        raise SceneError(f"camera at {view.pose.center.tolist()} is outside free space")
    hits = cast_rays(scene, view.pose, view.intrinsics)
    normals_cam = hits.normals @ view.pose.rotation
    image = np.where(hits.valid, scene.luminance(hits.points, hits.primitive), 0.0)
    return RenderedView(
        pose=view.pose,
        intrinsics=view.intrinsics,
        image=image,
        depth=DepthMap(hits.depth, hits.valid),
        normals=NormalMap(np.where(hits.valid[..., None], normals_cam, 0.0), hits.valid),
        hits=hits,
    )


def room_rects(extents, rng: np.random.Generator) -> list[Rect]:
    ex, ey, ez = extents
    seeds = rng.integers(0, 2**31 - 1, size=5)
    return [
        Rect(axis=1, offset=0.0, lo=(0.0, 0.0), hi=(ex, ez), texture_seed=int(seeds[0])),
        Rect(axis=1, offset=ey, lo=(0.0, 0.0), hi=(ex, ez), texture_seed=int(seeds[1])),
        Rect(axis=0, offset=0.0, lo=(0.0, 0.0), hi=(ey, ez), texture_seed=int(seeds[2])),
        Rect(axis=0, offset=ex, lo=(0.0, 0.0), hi=(ey, ez), texture_seed=int(seeds[3])),
        Rect(axis=2, offset=ez, lo=(0.0, 0.0), hi=(ex, ey), texture_seed=int(seeds[4])),
    ]


def generate_scene(cfg: SceneConfig) -> Scene:
    """Room plus non-overlapping boxes, spheres and pillar occluders, seeded."""
    rng = np.random.default_rng(cfg.seed)
    extents = np.asarray(cfg.room_extents, dtype=np.float64)
    primitives: list[Primitive] = list(room_rects(extents, rng))
    center = extents / 2.0
    placed: list[tuple[np.ndarray, float]] = []
    attempts = 0

    def place(radius: float, ring: Optional[tuple[float, float]] = None) -> np.ndarray:
        nonlocal attempts
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise SceneError(
                    f"could not place {len(placed) + 1} objects without overlap in "
                    f"{MAX_PLACEMENT_ATTEMPTS} attempts"
                )
            pos = rng.uniform(radius + 0.05, extents - radius - 0.05)
            horizontal = np.hypot(pos[0] - center[0], pos[2] - center[2])
            if horizontal < cfg.keepout_radius + radius:
                continue
            if ring is not None and not ring[0] <= horizontal <= ring[1]:
                continue
            if all(np.linalg.norm(pos - p) > radius + r + 0.05 for p, r in placed):
                placed.append((pos, radius))
                return pos

    for _ in range(cfg.n_boxes):
        half = rng.uniform(0.15, 0.4, size=3)
        pos = place(float(np.linalg.norm(half)))
        primitives.append(
            Box(tuple(pos - half), tuple(pos + half), int(rng.integers(0, 2**31 - 1)))
        )
    for _ in range(cfg.n_spheres):
        radius = float(rng.uniform(0.15, 0.4))
        pos = place(radius)
        primitives.append(Sphere(tuple(pos), radius, int(rng.integers(0, 2**31 - 1))))

    n_occluders = int(round(cfg.occluder_density * 12))
    for _ in range(n_occluders):
        half = np.array([0.05, 0.3, 0.05])
        pos = place(0.31, ring=(cfg.keepout_radius, cfg.keepout_radius + 1.0))
        primitives.append(
            Box(tuple(pos - half), tuple(pos + half), int(rng.integers(0, 2**31 - 1)))
        )

    logger.info(
        f"Generated scene seed={cfg.seed} with {len(primitives)} primitives ({n_occluders} occluders)"
    )
    return Scene(
        primitives=tuple(primitives),
        correlation_length=cfg.texture_correlation_length,
        room_extents=tuple(float(e) for e in extents),
        seed=cfg.seed,
    )


def _trajectory_poses(
    scene: Scene, n_frames: int, motion: str, rng: np.random.Generator, radius: float, step: float
) -> list[Pose]:
    extents = np.asarray(scene.room_extents or (5.0, 3.0, 5.0))
    center = extents / 2.0
    tilt = -0.15
    poses = []
    for i in range(n_frames):
        if motion == "line":
            offset = (i - (n_frames - 1) / 2.0) * step
            eye = center + np.array([offset, 0.0, 0.0])
            poses.append(look_at(eye, eye + np.array([0.0, tilt, 1.0])))
            continue
        angle = 2.0 * np.pi * i / n_frames
        outward = np.array([np.cos(angle), 0.0, np.sin(angle)])
        eye = center + radius * outward
        pose = look_at(eye, eye + outward + np.array([0.0, tilt, 0.0]))
        if motion == "jitter":
            eye = eye + rng.normal(scale=0.01, size=3)
            wobble = rotation_about(rng.normal(size=3), float(rng.normal(scale=0.01)))
            pose = Pose(wobble @ pose.rotation, eye)
        poses.append(pose)
    return poses


def generate_trajectory(
    scene: Scene,
    n_frames: int,
    motion: str = "orbit",
    seed: int = 0,
    intrinsics: Optional[Intrinsics] = None,
    radius: float = 0.5,
    step: float = 0.05,
) -> Trajectory:
    """Camera path inside the room.

    ``orbit`` circles the room centre at ``radius`` looking outward, ``line``
    translates sideways by ``step`` per frame and ``jitter`` perturbs the orbit.
    """
    if n_frames < 1:
        raise DomainError(f"trajectory needs at least one frame, got {n_frames}")
    if motion not in MOTIONS:
        raise DomainError(f"unknown motion '{motion}', expected one of {MOTIONS}")
    intrinsics = intrinsics or Intrinsics.default()
    rng = np.random.default_rng(seed)
    poses = _trajectory_poses(scene, n_frames, motion, rng, radius, step)
    frames = []
    for frame_id, pose in enumerate(poses):
        if not scene.contains(pose.center):
            raise SceneError(
                f"frame {frame_id} at {pose.center.tolist()} leaves free space"
            )
        frames.append(Frame(frame_id=frame_id, pose=pose, intrinsics=intrinsics, timestamp=frame_id))
    return Trajectory(tuple(frames))


def covisibility(scene: Scene, view_a: CameraView, view_b: CameraView, tolerance: float = 0.01) -> float:
    """Fraction of surface points seen by ``view_a`` that ``view_b`` also sees."""
    hits_a = cast_rays(scene, view_a.pose, view_a.intrinsics)
    if not hits_a.valid.any():
        return 0.0
    hits_b = cast_rays(scene, view_b.pose, view_b.intrinsics)
    points = view_b.pose.inverse().transform_points(hits_a.points[hits_a.valid])
    k = view_b.intrinsics
    z = points[:, 2]
    in_front = z > 1e-9
    safe_z = np.where(in_front, z, 1.0)
    u = np.rint(k.fx * points[:, 0] / safe_z + k.cx)
    v = np.rint(k.fy * points[:, 1] / safe_z + k.cy)
    inside = in_front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    ui = np.where(inside, u, 0).astype(np.int64)
    vi = np.where(inside, v, 0).astype(np.int64)
    agrees = np.abs(hits_b.depth[vi, ui] - z) <= tolerance * np.maximum(z, 1.0)
    seen = inside & hits_b.valid[vi, ui] & agrees
    return float(seen.mean())
