"""
Supervision losses with analytic gradients.

Every loss returns a :class:`LossResult` whose ``grad`` has the same layout as
the prediction it was computed from. All normalisation is by the number of
valid pixels at full resolution so that terms stay comparable across scales.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..exceptions import ContractViolation, DomainError
from .geometry import Intrinsics, Pose, relative_pose

logger = logging.getLogger(__name__)

N_SCALES = 4


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel z-depth in metres with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ContractViolation(
                f"depth {depth.shape} and mask {valid.shape} must be matching 2-D arrays"
            )
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, depth, valid=None) -> "DepthMap":
        """Wrap raw depths; without a mask, finite positive pixels are valid."""
        depth = np.asarray(depth, dtype=np.float64)
        if valid is None:
            valid = np.isfinite(depth) & (depth > 0)
        return cls(depth=depth, valid=valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def crop(self, window: tuple[int, int, int, int]) -> "DepthMap":
        u0, v0, w, h = window
        return DepthMap(self.depth[v0 : v0 + h, u0 : u0 + w], self.valid[v0 : v0 + h, u0 : u0 + w])

    def check_positive(self, what: str = "depth") -> None:
        values = self.depth[self.valid]
        if values.size and not (np.all(np.isfinite(values)) and values.min() > 0):
            raise DomainError(f"{what} has non-positive or non-finite values on valid pixels")


@dataclass(frozen=True, eq=False)
class NormalMap:
    """Per-pixel unit normals in the camera frame, oriented toward the camera."""

    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        normals = np.asarray(self.normals, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if normals.ndim != 3 or normals.shape[-1] != 3 or normals.shape[:2] != valid.shape:
            raise ContractViolation(f"normals {normals.shape} do not match mask {valid.shape}")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def crop(self, window: tuple[int, int, int, int]) -> "NormalMap":
        u0, v0, w, h = window
        return NormalMap(
            self.normals[v0 : v0 + h, u0 : u0 + w], self.valid[v0 : v0 + h, u0 : u0 + w]
        )


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    grad: float = 1.0
    normals: float = 1.0
    mv: float = 0.2


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    depth: float
    grad: float
    normals: float
    mv: float

    def components(self) -> dict[str, float]:
        return {"depth": self.depth, "grad": self.grad, "normals": self.normals, "mv": self.mv}

    def as_log_line(self, step: int) -> str:
        return f"{step} {self.total!r} {self.depth!r} {self.grad!r} {self.normals!r} {self.mv!r}"


def avg_pool2(values: np.ndarray) -> np.ndarray:
    """2x2 average pooling; an odd trailing row or column is cropped."""
    h, w = values.shape[0] // 2, values.shape[1] // 2
    cropped = values[: 2 * h, : 2 * w]
    return cropped.reshape(h, 2, w, 2, *values.shape[2:]).mean(axis=(1, 3))


def avg_pool2_backward(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`avg_pool2` for an input of ``shape``."""
    out = np.zeros(shape, dtype=np.float64)
    h, w = grad.shape[0], grad.shape[1]
    spread = np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) / 4.0
    out[: 2 * h, : 2 * w] = spread
    return out


def pool_mask2(valid: np.ndarray) -> np.ndarray:
    h, w = valid.shape[0] // 2, valid.shape[1] // 2
    return valid[: 2 * h, : 2 * w].reshape(h, 2, w, 2).all(axis=(1, 3))


@dataclass(frozen=True, eq=False)
class MultiScaleDepth:
    """Predictions at ``N_SCALES`` resolutions, finest first."""

    scales: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.scales) != N_SCALES:
            raise ContractViolation(f"expected {N_SCALES} scales, got {len(self.scales)}")
        object.__setattr__(
            self, "scales", tuple(np.asarray(s, dtype=np.float64) for s in self.scales)
        )

    @classmethod
    def from_single(cls, depth: np.ndarray) -> "MultiScaleDepth":
        """Build the pyramid by repeated 2x2 average pooling of a full-size map."""
        levels = [np.asarray(depth, dtype=np.float64)]
        for _ in range(N_SCALES - 1):
            prev = levels[-1]
            if min(prev.shape) < 2:
                raise DomainError(f"depth map {depth.shape} too small for {N_SCALES} scales")
            levels.append(avg_pool2(prev))
        return cls(tuple(levels))

    def backward(self, scale_grads: Sequence[np.ndarray]) -> np.ndarray:
        """Fold per-scale gradients of a pyramid built by ``from_single`` onto the base."""
        grad = np.array(scale_grads[-1], dtype=np.float64)
        for level in range(N_SCALES - 2, -1, -1):
            grad = avg_pool2_backward(grad, self.scales[level].shape) + scale_grads[level]
        return grad


def nearest_upsample_indices(small: int, large: int) -> np.ndarray:
    return (np.arange(large) * small) // large


def depth_loss(pred: MultiScaleDepth, gt: DepthMap) -> tuple[float, tuple[np.ndarray, ...]]:
    """Multi-scale log-depth L1, scale ``s`` weighted by ``1/s^2``.

    Coarse predictions are nearest-upsampled to the ground-truth grid. Returns
    the loss and one gradient per scale.
    """
    gt.check_positive("ground-truth depth")
    mask = gt.valid
    n_valid = int(mask.sum())
    grads = tuple(np.zeros_like(s) for s in pred.scales)
    if n_valid == 0:
        return 0.0, grads
    height, width = gt.shape
    log_gt = np.log(np.where(mask, gt.depth, 1.0))
    total = 0.0
    for index, scale in enumerate(pred.scales):
        weight = 1.0 / float(index + 1) ** 2
        rows = nearest_upsample_indices(scale.shape[0], height)
        cols = nearest_upsample_indices(scale.shape[1], width)
        up = scale[rows[:, None], cols[None, :]]
        if np.any(up[mask] <= 0) or not np.all(np.isfinite(up[mask])):
            raise DomainError(f"predicted depth at scale {index + 1} is non-positive")
        diff = np.where(mask, np.log(np.where(mask, up, 1.0)) - log_gt, 0.0)
        total += weight * float(np.abs(diff).sum())
        grad_up = np.where(mask, np.sign(diff) / np.where(mask, up, 1.0), 0.0) * (
            weight / n_valid
        )
        at = (np.broadcast_to(rows[:, None], up.shape), np.broadcast_to(cols[None, :], up.shape))
        np.add.at(grads[index], at, grad_up)
    return total / n_valid, grads


def _gradient_level(pred, gt, mask, n_valid):
    value = 0.0
    grad = np.zeros_like(pred)
    for axis in (1, 0):
        d_pred = np.diff(pred, axis=axis)
        d_gt = np.diff(gt, axis=axis)
        if axis == 1:
            pair = mask[:, 1:] & mask[:, :-1]
        else:
            pair = mask[1:, :] & mask[:-1, :]
        err = np.where(pair, d_pred - d_gt, 0.0)
        value += float(np.abs(err).sum())
        step = np.sign(err) / n_valid
        if axis == 1:
            grad[:, 1:] += step
            grad[:, :-1] -= step
        else:
            grad[1:, :] += step
            grad[:-1, :] -= step
    return value / n_valid, grad


def grad_loss(pred: DepthMap, gt: DepthMap) -> LossResult:
    """L1 on forward-difference depth gradients at four pooled scales.

    A difference counts only when both of its pixels are valid in both maps.
    """
    if pred.shape != gt.shape:
        raise ContractViolation(f"prediction {pred.shape} and target {gt.shape} differ in size")
    mask = pred.valid & gt.valid
    n_valid = int(mask.sum())
    if n_valid == 0:
        return LossResult(0.0, np.zeros(pred.shape))
    p_levels = [np.where(mask, pred.depth, 0.0)]
    g_levels = [np.where(mask, gt.depth, 0.0)]
    m_levels = [mask]
    for _ in range(N_SCALES - 1):
        if min(p_levels[-1].shape) < 2:
            break
        p_levels.append(avg_pool2(p_levels[-1]))
        g_levels.append(avg_pool2(g_levels[-1]))
        m_levels.append(pool_mask2(m_levels[-1]))

    total = 0.0
    level_grads = []
    for p, g, m in zip(p_levels, g_levels, m_levels):
        value, grad = _gradient_level(p, g, m, n_valid)
        total += value
        level_grads.append(grad)
    grad = level_grads[-1]
    for level in range(len(level_grads) - 2, -1, -1):
        grad = avg_pool2_backward(grad, p_levels[level].shape) + level_grads[level]
    return LossResult(total, np.where(mask, grad, 0.0))


def _camera_points(depth: np.ndarray, intrinsics: Intrinsics, offset: tuple[int, int]):
    height, width = depth.shape
    rays = intrinsics.pixel_rays((offset[0], offset[1], width, height))
    return rays, depth[..., None] * rays


def _normal_terms(depth_map: DepthMap, intrinsics: Intrinsics, offset: tuple[int, int]):
    depth = np.where(depth_map.valid, depth_map.depth, 0.0)
    rays, points = _camera_points(depth, intrinsics, offset)
    a = points[:-1, 1:] - points[:-1, :-1]
    b = points[1:, :-1] - points[:-1, :-1]
    c = np.cross(a, b)
    norm = np.linalg.norm(c, axis=-1)
    valid = (
        depth_map.valid[:-1, :-1]
        & depth_map.valid[:-1, 1:]
        & depth_map.valid[1:, :-1]
        & (norm > 1e-12)
    )
    sign = np.where(c[..., 2] > 0, -1.0, 1.0)
    safe = np.where(valid, norm, 1.0)
    unit = c / safe[..., None]
    return rays, a, b, unit, safe, sign, valid


def normals_from_depth(
    depth_map: DepthMap, intrinsics: Intrinsics, offset: tuple[int, int] = (0, 0)
) -> NormalMap:
    """Surface normals from the cross product of neighbouring backprojected points.

    ``offset`` is the image position of the map's top-left pixel, for crops.
    The last row and column have no forward neighbour and are invalid.
    """
    _, _, _, unit, _, sign, valid = _normal_terms(depth_map, intrinsics, offset)
    height, width = depth_map.shape
    normals = np.zeros((height, width, 3))
    mask = np.zeros((height, width), dtype=bool)
    normals[:-1, :-1] = np.where(valid[..., None], sign[..., None] * unit, 0.0)
    mask[:-1, :-1] = valid
    return NormalMap(normals, mask)


def normals_backward(
    depth_map: DepthMap,
    intrinsics: Intrinsics,
    grad_normals: np.ndarray,
    offset: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Chain a gradient on :func:`normals_from_depth` output back to depths."""
    rays, a, b, unit, norm, sign, valid = _normal_terms(depth_map, intrinsics, offset)
    g_n = np.where(valid[..., None], grad_normals[:-1, :-1], 0.0)
    along = np.sum(g_n * unit, axis=-1, keepdims=True)
    g_c = sign[..., None] * (g_n - along * unit) / norm[..., None]
    g_a = np.cross(b, g_c)
    g_b = np.cross(g_c, a)
    g_points = np.zeros(depth_map.shape + (3,))
    g_points[:-1, 1:] += g_a
    g_points[1:, :-1] += g_b
    g_points[:-1, :-1] -= g_a + g_b
    return np.where(depth_map.valid, np.sum(g_points * rays, axis=-1), 0.0)


def normal_loss(pred: NormalMap, gt: NormalMap) -> LossResult:
    """Mean of ``(1 - n_hat . n) / 2`` over pixels valid in both maps."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"normal maps differ in size: {pred.shape} vs {gt.shape}")
    mask = pred.valid & gt.valid
    count = int(mask.sum())
    if count == 0:
        return LossResult(0.0, np.zeros(pred.normals.shape))
    dots = np.sum(pred.normals * gt.normals, axis=-1)
    value = float(np.sum(np.where(mask, 1.0 - dots, 0.0))) / (2.0 * count)
    grad = np.where(mask[..., None], -gt.normals / (2.0 * count), 0.0)
    return LossResult(value, grad)


@dataclass(frozen=True)
class SourceDepth:
    """A neighbouring view's ground truth used by the multi-view loss."""

    pose: Pose
    intrinsics: Intrinsics
    depth: DepthMap


def mv_loss(
    pred: DepthMap,
    ref_pose: Pose,
    ref_intrinsics: Intrinsics,
    sources: Sequence[SourceDepth],
    offset: tuple[int, int] = (0, 0),
) -> LossResult:
    """Log-depth L1 between reprojected predictions and each source's ground truth.

    Each valid prediction is moved into the source camera and compared with the
    source depth at the nearest pixel; terms falling outside the source image,
    behind it or on invalid source pixels are skipped.
    """
    pred.check_positive("predicted depth")
    height, width = pred.shape
    rays = ref_intrinsics.pixel_rays((offset[0], offset[1], width, height))
    depth = np.where(pred.valid, pred.depth, 1.0)
    total = 0.0
    count = 0
    grad = np.zeros(pred.shape)
    for source in sources:
        rel = relative_pose(source.pose, ref_pose)
        rotated = rays @ rel.rotation.T
        points = depth[..., None] * rotated + rel.translation
        z = points[..., 2]
        in_front = pred.valid & (z > 1e-9)
        safe_z = np.where(in_front, z, 1.0)
        k = source.intrinsics
        u = np.rint(k.fx * points[..., 0] / safe_z + k.cx)
        v = np.rint(k.fy * points[..., 1] / safe_z + k.cy)
        hit = in_front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        ui = np.where(hit, u, 0).astype(np.int64)
        vi = np.where(hit, v, 0).astype(np.int64)
        hit &= source.depth.valid[vi, ui]
        target = source.depth.depth[vi, ui]
        if np.any(target[hit] <= 0):
            raise DomainError("source ground-truth depth is non-positive on a valid pixel")
        diff = np.where(hit, np.log(safe_z) - np.log(np.where(hit, target, 1.0)), 0.0)
        total += float(np.abs(diff).sum())
        count += int(hit.sum())
        grad += np.where(hit, np.sign(diff) / safe_z * rotated[..., 2], 0.0)
    if count == 0:
        return LossResult(0.0, grad)
    return LossResult(total / count, grad / count)


def total_loss(
    depth: LossResult,
    grad: LossResult,
    normals: LossResult,
    mv: LossResult,
    weights: LossWeights = LossWeights(),
) -> tuple[LossBreakdown, np.ndarray]:
    """Weighted sum of component losses whose gradients share one layout."""
    value = (
        depth.value + weights.grad * grad.value + weights.normals * normals.value + weights.mv * mv.value
    )
    gradient = depth.grad + weights.grad * grad.grad + weights.normals * normals.grad + weights.mv * mv.grad
    breakdown = LossBreakdown(
        total=value, depth=depth.value, grad=grad.value, normals=normals.value, mv=mv.value
    )
    return breakdown, gradient


def supervised_loss(
    pred_depth: np.ndarray,
    gt: DepthMap,
    gt_normals: NormalMap,
    ref_pose: Pose,
    intrinsics: Intrinsics,
    sources: Sequence[SourceDepth],
    weights: LossWeights = LossWeights(),
    offset: tuple[int, int] = (0, 0),
    scales: Optional[MultiScaleDepth] = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """All four supervision terms for a full-resolution prediction.

    The gradient is with respect to ``pred_depth``. When ``scales`` is omitted
    the pyramid is built from ``pred_depth`` by average pooling.
    """
    pyramid = scales if scales is not None else MultiScaleDepth.from_single(pred_depth)
    depth_value, scale_grads = depth_loss(pyramid, gt)
    depth_term = LossResult(depth_value, pyramid.backward(scale_grads))

    pred = DepthMap(pred_depth, np.ones(pred_depth.shape, dtype=bool))
    grad_term = grad_loss(pred, gt)

    pred_normals = normals_from_depth(pred, intrinsics, offset)
    normal_result = normal_loss(pred_normals, gt_normals)
    normal_term = LossResult(
        normal_result.value, normals_backward(pred, intrinsics, normal_result.grad, offset)
    )

    mv_term = mv_loss(pred, ref_pose, intrinsics, sources, offset)
    return total_loss(depth_term, grad_term, normal_term, mv_term, weights)
