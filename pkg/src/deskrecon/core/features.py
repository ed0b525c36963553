"""
Per-pixel matching features.

Two extractors produce the same :class:`FeatureMap`: an oracle that reads the
scene's procedural texture at the exact surface point seen by each pixel, and
normalised image patches as a learning-free stand-in for a CNN encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ContractViolation, DomainError
from .geometry import CameraView
from .synth import Scene, cast_rays

logger = logging.getLogger(__name__)

NORM_EPSILON = 1e-12
EXTRACTORS = ("oracle", "patch")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """``(H, W, F)`` features. Normalised maps hold unit vectors on valid pixels."""

    data: np.ndarray
    valid: np.ndarray
    normalized: bool = True
    view_id: Optional[Union[int, str]] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if data.ndim != 3 or data.shape[:2] != valid.shape:
            raise ContractViolation(f"feature data {data.shape} does not match mask {valid.shape}")
        if not np.all(np.isfinite(data)):
            raise DomainError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def downsample(self, stride: int) -> "FeatureMap":
        """Keep every ``stride``-th pixel, renormalising if the map was normalised."""
        if stride < 1:
            raise DomainError(f"stride must be >= 1, got {stride}")
        data = self.data[::stride, ::stride]
        valid = self.valid[::stride, ::stride]
        if self.normalized:
            data, valid = _normalize(data, valid)
        return FeatureMap(data, valid, self.normalized, self.view_id)


def _normalize(data: np.ndarray, valid: np.ndarray):
    norms = np.linalg.norm(data, axis=-1)
    valid = valid & (norms > NORM_EPSILON)
    data = np.where(valid[..., None], data / np.where(valid, norms, 1.0)[..., None], 0.0)
    return data, valid


def extract_oracle_features(scene: Scene, view: CameraView, channels: int, view_id=None) -> FeatureMap:
    """Normalised texture sampled at the surface point hit by each pixel."""
    if channels < 2:
        raise DomainError(f"feature dimension must be >= 2, got {channels}")
    hits = cast_rays(scene, view.pose, view.intrinsics)
    raw = scene.texture(hits.points, np.where(hits.valid, hits.primitive, -1), channels)
    data, valid = _normalize(raw, hits.valid)
    return FeatureMap(data, valid, normalized=True, view_id=view_id)


def extract_patch_features(image: np.ndarray, patch_size: int, view_id=None) -> FeatureMap:
    """Zero-mean, unit-norm ``k x k`` patches around every pixel.

    Borders are clamped. Flat patches have no direction and are marked invalid.
    The result is invariant to affine intensity changes ``a * I + b`` with a > 0.
    """
    if patch_size < 3 or patch_size % 2 == 0:
        raise DomainError(f"patch size must be odd and at least 3, got {patch_size}")
    image = np.ascontiguousarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractViolation(f"expected a single-channel image, got shape {image.shape}")
    r = patch_size // 2
    padded = cv2.copyMakeBorder(image, r, r, r, r, cv2.BORDER_REPLICATE)
    windows = sliding_window_view(padded, (patch_size, patch_size))
    data = windows.reshape(image.shape[0], image.shape[1], patch_size * patch_size)
    data = data - data.mean(axis=-1, keepdims=True)
    scale = np.abs(image).max() if image.size else 0.0
    norms = np.linalg.norm(data, axis=-1)
    valid = norms > max(NORM_EPSILON, 1e-9 * scale)
    data = np.where(valid[..., None], data / np.where(valid, norms, 1.0)[..., None], 0.0)
    return FeatureMap(data, valid, normalized=True, view_id=view_id)


def extract_features(
    extractor: str,
    channels: int,
    patch_size: int,
    view: CameraView,
    image: Optional[np.ndarray] = None,
    scene: Optional[Scene] = None,
    view_id=None,
) -> FeatureMap:
    if extractor == "oracle":
        if scene is None:
            raise ContractViolation("oracle features need the scene")
        return extract_oracle_features(scene, view, channels, view_id=view_id)
    if extractor == "patch":
        if image is None:
            raise ContractViolation("patch features need the image")
        return extract_patch_features(image, patch_size, view_id=view_id)
    raise DomainError(f"unknown feature extractor '{extractor}', expected one of {EXTRACTORS}")


def feature_dot(f0: np.ndarray, fn: np.ndarray) -> float:
    f0 = np.asarray(f0, dtype=np.float64)
    fn = np.asarray(fn, dtype=np.float64)
    if f0.shape != fn.shape:
        raise ContractViolation(f"feature widths differ: {f0.shape} vs {fn.shape}")
    return float(np.dot(f0, fn))
