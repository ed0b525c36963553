"""
Plane-sweep cost volumes with per-source metadata.

For every reference pixel and every fronto-parallel depth plane the volume
stores, channel-innermost, in this order:

    f0 (F) | <f^n> (N*F) | f0 . f^n (N) | r0 (3) | r^n (3N) | z0 (1) | z^n (N)
    | angle(r0, r^n) (N) | pose distance (N) | validity mask (N)

Rays are unit world-space directions from each camera centre to the 3D point
on the plane. Source slots beyond the available sources are padding: all
zeros with a zero mask. Cells whose source sample is invalid have every
source-derived channel zeroed, so the mask is the only thing telling them apart.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import softmax

from ..exceptions import ContractViolation, DataFormatError, DomainError
from ..utils.fileio import atomic_write_bytes
from .features import FeatureMap
from .geometry import Intrinsics, Pose, backproject_points, in_image, pose_distance, relative_pose
from .losses import DepthMap
from .tinynet import Mlp

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"DRVOLUM1"
_VOLUME_HEADER = struct.Struct("<8s6I")
REDUCERS = ("dot_sum", "mlp", "zero")


@dataclass(frozen=True)
class DepthPlanes:
    depths: np.ndarray

    def __post_init__(self):
        depths = np.asarray(self.depths, dtype=np.float64)
        if depths.ndim != 1 or depths.size < 2:
            raise DomainError("need at least two depth planes")
        if depths[0] <= 0 or np.any(np.diff(depths) <= 0):
            raise DomainError("depth planes must be positive and strictly increasing")
        object.__setattr__(self, "depths", depths)

    def __len__(self) -> int:
        return int(self.depths.size)


def make_depth_planes(d_min: float, d_max: float, count: int) -> DepthPlanes:
    """Planes uniformly spaced in inverse depth, endpoints exact."""
    if not 0 < d_min < d_max:
        raise DomainError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    if count < 2:
        raise DomainError(f"need at least two planes, got {count}")
    depths = 1.0 / np.linspace(1.0 / d_min, 1.0 / d_max, count)
    depths[0] = d_min
    depths[-1] = d_max
    return DepthPlanes(depths)


@dataclass(frozen=True)
class ChannelConfig:
    """Which metadata groups enter the volume. Dots are always available."""

    feats: bool = True
    dots: bool = True
    rays: bool = True
    depth: bool = True
    angle: bool = True
    pose_dist: bool = True
    mask: bool = True

    @classmethod
    def dots_only(cls) -> "ChannelConfig":
        return cls(feats=False, rays=False, depth=False, angle=False, pose_dist=False, mask=False)

    @classmethod
    def dots_feats_mask_depth(cls) -> "ChannelConfig":
        return cls(rays=False, angle=False, pose_dist=False)

    @classmethod
    def plus_ray_angle(cls) -> "ChannelConfig":
        return cls(pose_dist=False)

    @classmethod
    def full(cls) -> "ChannelConfig":
        return cls()

    @classmethod
    def preset(cls, name: str) -> "ChannelConfig":
        presets = {
            "dots_only": cls.dots_only,
            "dots_feats_mask_depth": cls.dots_feats_mask_depth,
            "plus_ray_angle": cls.plus_ray_angle,
            "full": cls.full,
        }
        if name not in presets:
            raise DomainError(f"unknown channel preset '{name}', expected one of {sorted(presets)}")
        return presets[name]()

    def bits(self) -> int:
        flags = (self.feats, self.dots, self.rays, self.depth, self.angle, self.pose_dist, self.mask)
        return sum(int(flag) << i for i, flag in enumerate(flags))

    @classmethod
    def from_bits(cls, bits: int) -> "ChannelConfig":
        names = ("feats", "dots", "rays", "depth", "angle", "pose_dist", "mask")
        return cls(**{name: bool(bits >> i & 1) for i, name in enumerate(names)})


@dataclass(frozen=True)
class ChannelLayout:
    """Channel slices for a given feature width, slot count and config."""

    features: int
    slots: int
    config: ChannelConfig
    slices: dict = field(init=False, repr=False, compare=False)
    width: int = field(init=False)

    def __post_init__(self):
        f, n, cfg = self.features, self.slots, self.config
        groups = [
            ("feat_ref", f, cfg.feats),
            ("feat_src", n * f, cfg.feats),
            ("dots", n, cfg.dots),
            ("ray_ref", 3, cfg.rays),
            ("ray_src", 3 * n, cfg.rays),
            ("depth_ref", 1, cfg.depth),
            ("depth_src", n, cfg.depth),
            ("angle", n, cfg.angle),
            ("pose_dist", n, cfg.pose_dist),
            ("mask", n, cfg.mask),
        ]
        slices = {}
        start = 0
        for name, width, enabled in groups:
            if enabled:
                slices[name] = slice(start, start + width)
                start += width
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "width", start)


def channel_count(features: int, slots: int, config: ChannelConfig = ChannelConfig()) -> int:
    return ChannelLayout(features, slots, config).width


@dataclass(frozen=True)
class SweepView:
    """Features of one view together with its camera."""

    features: FeatureMap
    pose: Pose
    intrinsics: Intrinsics

    def __post_init__(self):
        if (self.features.height, self.features.width) != self.intrinsics.shape:
            raise ContractViolation(
                f"feature map {self.features.height}x{self.features.width} does not match "
                f"intrinsics {self.intrinsics.height}x{self.intrinsics.width}"
            )


@dataclass(frozen=True, eq=False)
class MetadataVolume:
    data: np.ndarray
    dots: np.ndarray
    mask: np.ndarray
    planes: DepthPlanes
    layout: ChannelLayout
    n_sources: int
    window: tuple[int, int, int, int]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def channel(self, name: str) -> np.ndarray:
        if name not in self.layout.slices:
            raise ContractViolation(f"channel group '{name}' is disabled in this volume")
        return self.data[..., self.layout.slices[name]]


@dataclass(frozen=True, eq=False)
class CostSlice:
    """One score per (plane, row, column)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ContractViolation(f"cost slice must be (D, H, W), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("cost slice contains non-finite scores")
        object.__setattr__(self, "values", values)


def sample_bilinear(data: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinearly sample an ``(H, W, F)`` map at sub-pixel ``(u, v)``; returns ``(M, F)``."""
    channels = data.shape[-1]
    m = u.size
    coords = np.empty((3, m, channels))
    coords[0] = v.reshape(m, 1)
    coords[1] = u.reshape(m, 1)
    coords[2] = np.arange(channels)[None, :]
    out = map_coordinates(data, coords.reshape(3, -1), order=1, mode="nearest", prefilter=False)
    return out.reshape(m, channels)


def build_metadata_volume(
    ref: SweepView,
    sources: Sequence[SweepView],
    planes: DepthPlanes,
    config: ChannelConfig = ChannelConfig(),
    max_sources: int = 8,
    window: Optional[tuple[int, int, int, int]] = None,
) -> MetadataVolume:
    """Warp every source onto every plane and assemble the per-cell feature vector.

    ``window`` is ``(u0, v0, w, h)`` in reference pixels and defaults to the
    whole image. Sources fill slots in the order given.
    """
    if not sources:
        raise DomainError("cannot build a cost volume without source views")
    if len(sources) > max_sources:
        raise DomainError(f"{len(sources)} sources exceed the {max_sources} available slots")
    f = ref.features.channels
    for src in sources:
        if src.features.channels != f:
            raise ContractViolation(
                f"source feature width {src.features.channels} differs from reference {f}"
            )
    k_ref = ref.intrinsics
    u0, v0, w, h = window if window is not None else (0, 0, k_ref.width, k_ref.height)
    if u0 < 0 or v0 < 0 or u0 + w > k_ref.width or v0 + h > k_ref.height or w < 1 or h < 1:
        raise DomainError(f"window {(u0, v0, w, h)} outside {k_ref.width}x{k_ref.height} image")

    layout = ChannelLayout(f, max_sources, config)
    slices = layout.slices
    n_planes = len(planes)
    data = np.zeros((n_planes, h, w, layout.width), dtype=np.float32)
    dots = np.zeros((n_planes, h, w, max_sources))
    mask = np.zeros((n_planes, h, w, max_sources), dtype=bool)

    uu, vv = np.meshgrid(np.arange(u0, u0 + w), np.arange(v0, v0 + h))
    plane_depths = planes.depths[:, None, None]
    points_ref = backproject_points(uu[None], vv[None], plane_depths, k_ref)
    world = ref.pose.transform_points(points_ref)
    ray_ref = world - ref.pose.center
    ray_ref /= np.linalg.norm(ray_ref, axis=-1, keepdims=True)
    f_ref = ref.features.data[v0 : v0 + h, u0 : u0 + w]

    if "feat_ref" in slices:
        data[..., slices["feat_ref"]] = f_ref[None]
    if "ray_ref" in slices:
        data[..., slices["ray_ref"]] = ray_ref
    if "depth_ref" in slices:
        data[..., slices["depth_ref"]] = plane_depths[..., None]

    for n, src in enumerate(sources):
        to_src = relative_pose(src.pose, ref.pose)
        points_src = to_src.transform_points(points_ref)
        z = points_src[..., 2]
        in_front = z > 0
        safe_z = np.where(in_front, z, 1.0)
        k = src.intrinsics
        su = k.fx * points_src[..., 0] / safe_z + k.cx
        sv = k.fy * points_src[..., 1] / safe_z + k.cy
        valid = in_front & in_image(su, sv, k)

        sampled = np.zeros((n_planes, h, w, f))
        if valid.any():
            sampled[valid] = sample_bilinear(src.features.data, su[valid], sv[valid])
        cell_dots = np.where(valid, np.sum(f_ref[None] * sampled, axis=-1), 0.0)
        dots[..., n] = cell_dots
        mask[..., n] = valid

        if "feat_src" in slices:
            start = slices["feat_src"].start + n * f
            data[..., start : start + f] = sampled
        if "dots" in slices:
            data[..., slices["dots"].start + n] = cell_dots
        if "ray_src" in slices or "angle" in slices:
            ray_src = world - src.pose.center
            ray_src /= np.maximum(np.linalg.norm(ray_src, axis=-1, keepdims=True), 1e-12)
            if "ray_src" in slices:
                start = slices["ray_src"].start + 3 * n
                data[..., start : start + 3] = np.where(valid[..., None], ray_src, 0.0)
            if "angle" in slices:
                cosine = np.clip(np.sum(ray_ref * ray_src, axis=-1), -1.0, 1.0)
                data[..., slices["angle"].start + n] = np.where(valid, np.arccos(cosine), 0.0)
        if "depth_src" in slices:
            data[..., slices["depth_src"].start + n] = np.where(valid, z, 0.0)
        if "pose_dist" in slices:
            data[..., slices["pose_dist"].start + n] = np.where(
                valid, pose_distance(ref.pose, src.pose), 0.0
            )
        if "mask" in slices:
            data[..., slices["mask"].start + n] = valid

    valid_share = 100.0 * mask[..., : len(sources)].mean()
    logger.debug(f"Built {data.shape} volume from {len(sources)} sources ({valid_share:.1f}% valid samples)")
    return MetadataVolume(
        data=data,
        dots=dots,
        mask=mask,
        planes=planes,
        layout=layout,
        n_sources=len(sources),
        window=(u0, v0, w, h),
    )


def reduce_dot_sum(volume: MetadataVolume) -> CostSlice:
    """Masked sum of source dot products per cell.

    Contributions are summed in sorted order so the result does not depend on
    the order the sources were given in.
    """
    contributions = np.where(volume.mask, volume.dots, 0.0)
    return CostSlice(np.sort(contributions, axis=-1).sum(axis=-1))


def reduce_mlp(volume: MetadataVolume, net: Mlp) -> CostSlice:
    if net.in_dim != volume.channels:
        raise ContractViolation(
            f"network expects {net.in_dim} channels, volume has {volume.channels}"
        )
    flat = volume.data.reshape(-1, volume.channels)
    scores, _ = net.forward(flat)
    return CostSlice(scores.reshape(volume.data.shape[:3]))


def zero_cost_volume(cost: CostSlice) -> CostSlice:
    return CostSlice(np.zeros_like(cost.values))


def plane_probabilities(cost: CostSlice, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    return softmax(cost.values / temperature, axis=0)


def cost_to_depth(cost: CostSlice, planes: DepthPlanes, temperature: float = 1.0) -> DepthMap:
    """Soft-argmax over planes: the probability-weighted mean plane depth."""
    if cost.values.shape[0] != len(planes):
        raise ContractViolation(
            f"cost has {cost.values.shape[0]} planes, expected {len(planes)}"
        )
    probs = plane_probabilities(cost, temperature)
    depth = np.tensordot(planes.depths, probs, axes=(0, 0))
    return DepthMap(depth, np.ones(depth.shape, dtype=bool))


def cost_to_depth_backward(
    cost: CostSlice, planes: DepthPlanes, grad_depth: np.ndarray, temperature: float = 1.0
) -> np.ndarray:
    """Gradient of :func:`cost_to_depth` with respect to the cost scores."""
    probs = plane_probabilities(cost, temperature)
    depth = np.tensordot(planes.depths, probs, axes=(0, 0))
    return probs * (planes.depths[:, None, None] - depth[None]) * grad_depth[None] / temperature


def predict_depth(
    ref: SweepView,
    sources: Sequence[SweepView],
    planes: DepthPlanes,
    reducer: str = "dot_sum",
    net: Optional[Mlp] = None,
    config: ChannelConfig = ChannelConfig(),
    max_sources: int = 8,
    temperature: float = 1.0,
    rows_per_chunk: int = 8,
) -> DepthMap:
    """Full-image depth, building the volume a band of rows at a time."""
    if reducer not in REDUCERS:
        raise DomainError(f"unknown reducer '{reducer}', expected one of {REDUCERS}")
    if reducer == "mlp" and net is None:
        raise ContractViolation("the mlp reducer needs a network")
    if reducer != "mlp":
        # only the dot products are read
        config = ChannelConfig.dots_only()
    k = ref.intrinsics
    depth = np.empty(k.shape)
    for v0 in range(0, k.height, rows_per_chunk):
        rows = min(rows_per_chunk, k.height - v0)
        volume = build_metadata_volume(
            ref, sources, planes, config, max_sources=max_sources, window=(0, v0, k.width, rows)
        )
        if reducer == "mlp":
            cost = reduce_mlp(volume, net)
        else:
            cost = reduce_dot_sum(volume)
            if reducer == "zero":
                cost = zero_cost_volume(cost)
        depth[v0 : v0 + rows] = cost_to_depth(cost, planes, temperature).depth
    return DepthMap(depth, np.ones(depth.shape, dtype=bool))


@dataclass(frozen=True, eq=False)
class VolumeDump:
    data: np.ndarray
    slots: int
    config: ChannelConfig


def save_volume(path: str | Path, volume: MetadataVolume) -> None:
    """Binary dump: fixed header, then little-endian float32 ``D x H x W x C``."""
    d, h, w, c = volume.data.shape
    header = _VOLUME_HEADER.pack(
        VOLUME_MAGIC, c, d, h, w, volume.layout.slots, volume.layout.config.bits()
    )
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def load_volume(path: str | Path) -> VolumeDump:
    raw = Path(path).read_bytes()
    if len(raw) < _VOLUME_HEADER.size:
        raise DataFormatError(path, "truncated volume header", len(raw))
    magic, c, d, h, w, slots, bits = _VOLUME_HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise DataFormatError(path, f"bad magic {magic!r}", 0)
    expected = _VOLUME_HEADER.size + 4 * c * d * h * w
    if len(raw) != expected:
        raise DataFormatError(path, f"payload size mismatch, expected {expected} bytes", len(raw))
    data = np.frombuffer(raw, dtype="<f4", offset=_VOLUME_HEADER.size).reshape(d, h, w, c)
    return VolumeDump(data=data.astype(np.float32), slots=slots, config=ChannelConfig.from_bits(bits))
