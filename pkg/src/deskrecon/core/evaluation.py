"""
Depth-map and mesh metrics.

Mesh metrics compare point samples of the two surfaces with exact nearest
neighbours from a uniform spatial hash (cell size = the precision/recall
threshold), which is checked against brute force in the test suite.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np

from ..exceptions import ContractViolation, DomainError, EmptyResultError
from .fusion import TriangleMesh
from .geometry import CameraView, in_image, project_points
from .losses import DepthMap

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD_CM = 5.0
DEFAULT_SAMPLES = 200_000
MAX_SHELL_RADIUS = 3
BRUTE_FORCE_PAIRS = 1_000_000


@dataclass(frozen=True)
class DepthMetrics:
    abs_diff: float
    abs_rel: float
    sq_rel: float
    rmse: float
    delta_1_05: float
    delta_1_25: float
    valid_pixel_count: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MeshMetrics:
    comp: float
    acc: float
    chamfer: float
    prec: float
    recall: float
    fscore: float
    threshold: float

    def as_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred: DepthMap, gt: DepthMap) -> DepthMetrics:
    if pred.shape != gt.shape:
        raise ContractViolation(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = pred.valid & gt.valid
    if not mask.any():
        raise EmptyResultError("no pixels are valid in both prediction and ground truth")
    p = pred.depth[mask]
    g = gt.depth[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise DomainError("depth metrics need positive depths on valid pixels")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_diff=float(np.mean(np.abs(diff))),
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        delta_1_05=100.0 * float(np.mean(ratio < 1.05)),
        delta_1_25=100.0 * float(np.mean(ratio < 1.25)),
        valid_pixel_count=int(mask.sum()),
    )


def aggregate_depth_metrics(metrics: Sequence[DepthMetrics]) -> DepthMetrics:
    """Per-frame metrics averaged with equal weight per frame."""
    if not metrics:
        raise EmptyResultError("no depth metrics to aggregate")
    return DepthMetrics(
        abs_diff=float(np.mean([m.abs_diff for m in metrics])),
        abs_rel=float(np.mean([m.abs_rel for m in metrics])),
        sq_rel=float(np.mean([m.sq_rel for m in metrics])),
        rmse=float(np.mean([m.rmse for m in metrics])),
        delta_1_05=float(np.mean([m.delta_1_05 for m in metrics])),
        delta_1_25=float(np.mean([m.delta_1_25 for m in metrics])),
        valid_pixel_count=int(sum(m.valid_pixel_count for m in metrics)),
    )


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise DomainError("cannot sample an empty mesh")
    if n < 1:
        raise DomainError(f"need at least one sample, got {n}")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise DomainError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    corners = mesh.corners()[faces]
    return (
        (1.0 - r1)[:, None] * corners[:, 0]
        + (r1 * (1.0 - r2))[:, None] * corners[:, 1]
        + (r1 * r2)[:, None] * corners[:, 2]
    )


def brute_force_nearest(queries: np.ndarray, points: np.ndarray, max_pairs: int = BRUTE_FORCE_PAIRS):
    """O(n*m) nearest neighbours; the reference the hash grid is tested against.

    Queries are processed in chunks of at most ``max_pairs`` query-point pairs.
    Ties go to the lowest point index.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    distances = np.empty(len(queries))
    index = np.empty(len(queries), dtype=np.int64)
    chunk = max(1, max_pairs // max(len(points), 1))
    for start in range(0, len(queries), chunk):
        block = queries[start : start + chunk]
        d2 = ((block[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        nearest = d2.argmin(axis=1)
        distances[start : start + chunk] = np.sqrt(d2[np.arange(len(block)), nearest])
        index[start : start + chunk] = nearest
    return distances, index


class SpatialHashGrid:
    """Uniform grid over a point set for exact nearest-neighbour queries."""

    def __init__(self, points: np.ndarray, cell_size: float):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise DomainError("cannot index an empty point set")
        if cell_size <= 0:
            raise DomainError(f"cell size must be positive, got {cell_size}")
        self.points = points
        self.cell_size = float(cell_size)
        cells = np.floor(points / self.cell_size).astype(np.int64)
        self._lo = cells.min(axis=0) - MAX_SHELL_RADIUS - 1
        self._span = cells.max(axis=0) - self._lo + MAX_SHELL_RADIUS + 2
        keys = self._encode(cells)
        order = np.argsort(keys, kind="stable")
        self._order = order
        self._keys = keys[order]

    def _encode(self, cells: np.ndarray) -> np.ndarray:
        c = cells - self._lo
        return (c[..., 0] * self._span[1] + c[..., 1]) * self._span[2] + c[..., 2]

    def _gather(self, query_cells: np.ndarray, offsets: np.ndarray):
        """Candidate (query index, point index) pairs for cells at ``offsets``."""
        cells = query_cells[:, None, :] + offsets[None, :, :]
        inside = np.all((cells - self._lo >= 0) & (cells - self._lo < self._span), axis=-1)
        keys = np.where(inside, self._encode(cells), -1)
        starts = np.searchsorted(self._keys, keys, side="left")
        stops = np.searchsorted(self._keys, keys, side="right")
        counts = np.where(inside, stops - starts, 0).ravel()
        query_index = np.repeat(np.repeat(np.arange(len(query_cells)), offsets.shape[0]), counts)
        if counts.sum() == 0:
            return query_index, np.zeros(0, dtype=np.int64)
        first = np.repeat(starts.ravel(), counts)
        run_start = np.repeat(np.cumsum(counts) - counts, counts)
        within = np.arange(counts.sum()) - run_start
        return query_index, self._order[first + within]

    def query(self, queries: np.ndarray):
        """Distances and indices of the nearest indexed point to every query."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        best = np.full(len(queries), np.inf)
        best_index = np.full(len(queries), -1, dtype=np.int64)
        pending = np.arange(len(queries))
        query_cells = np.floor(queries / self.cell_size).astype(np.int64)
        for radius in range(MAX_SHELL_RADIUS + 1):
            if pending.size == 0:
                break
            steps = np.arange(-radius, radius + 1)
            cube = np.stack(np.meshgrid(steps, steps, steps, indexing="ij"), axis=-1).reshape(-1, 3)
            shell = cube[np.abs(cube).max(axis=1) == radius]
            q_local, p_index = self._gather(query_cells[pending], shell)
            if p_index.size:
                q_index = pending[q_local]
                d = np.sqrt(((queries[q_index] - self.points[p_index]) ** 2).sum(-1))
                # stable sort so ties keep the lowest point index, like brute force
                order = np.lexsort((p_index, d))
                q_sorted = q_index[order]
                first = np.unique(q_sorted, return_index=True)[1]
                winners = order[first]
                w_query = q_index[winners]
                w_dist = d[winners]
                w_point = p_index[winners]
                better = (w_dist < best[w_query]) | (
                    (w_dist == best[w_query]) & (w_point < best_index[w_query])
                )
                best[w_query[better]] = w_dist[better]
                best_index[w_query[better]] = w_point[better]
            # anything beyond this shell is at least radius * cell away
            pending = pending[best[pending] >= radius * self.cell_size]
        if pending.size:
            d, index = brute_force_nearest(queries[pending], self.points)
            best[pending] = d
            best_index[pending] = index
        return best, best_index


def _as_points(surface: Union[np.ndarray, TriangleMesh], n_samples: int, seed: int) -> np.ndarray:
    if isinstance(surface, TriangleMesh):
        return sample_surface(surface, n_samples, seed)
    points = np.asarray(surface, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise DomainError("cannot evaluate an empty point set")
    return points


def mesh_metrics(
    pred: Union[np.ndarray, TriangleMesh],
    gt: Union[np.ndarray, TriangleMesh],
    threshold_cm: float = DEFAULT_THRESHOLD_CM,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
) -> MeshMetrics:
    """Accuracy, completeness, chamfer and F-score, distances in centimetres."""
    pred_points = _as_points(pred, n_samples, seed)
    gt_points = _as_points(gt, n_samples, seed + 1)
    threshold_m = threshold_cm / 100.0
    to_gt, _ = SpatialHashGrid(gt_points, threshold_m).query(pred_points)
    to_pred, _ = SpatialHashGrid(pred_points, threshold_m).query(gt_points)
    acc = float(to_gt.mean()) * 100.0
    comp = float(to_pred.mean()) * 100.0
    prec = float(np.mean(to_gt * 100.0 < threshold_cm))
    recall = float(np.mean(to_pred * 100.0 < threshold_cm))
    fscore = 2.0 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return MeshMetrics(
        comp=comp,
        acc=acc,
        chamfer=(acc + comp) / 2.0,
        prec=prec,
        recall=recall,
        fscore=fscore,
        threshold=threshold_cm,
    )


def frustum_visibility(points: np.ndarray, views: Sequence[CameraView], d_max: float) -> np.ndarray:
    """Mask of points inside at least one camera frustum, no farther than ``d_max``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    seen = np.zeros(len(points), dtype=bool)
    for view in views:
        cam = view.pose.inverse().transform_points(points)
        z = cam[:, 2]
        k = view.intrinsics
        front = (z > 0) & (z <= d_max)
        safe_z = np.where(front, z, 1.0)
        u = k.fx * cam[:, 0] / safe_z + k.cx
        v = k.fy * cam[:, 1] / safe_z + k.cy
        seen |= front & (u >= -0.5) & (u < k.width - 0.5) & (v >= -0.5) & (v < k.height - 0.5)
    return seen


def covisible_mask(
    gt: DepthMap,
    view: CameraView,
    sources: Sequence[tuple[CameraView, DepthMap]],
    rel_tolerance: float = 0.05,
) -> np.ndarray:
    """Pixels whose ground-truth surface point every source view sees.

    A source sees the point when it lands inside the source image and the
    source's own ground truth at the nearest pixel agrees with the point's
    depth to within ``rel_tolerance``; anything nearer occludes it.
    """
    if gt.shape != view.intrinsics.shape:
        raise ContractViolation(f"depth {gt.shape} does not match intrinsics {view.intrinsics.shape}")
    seen = gt.valid.copy()
    if not sources:
        return np.zeros_like(seen)
    world = view.pose.transform_points(view.intrinsics.pixel_rays() * gt.depth[..., None])
    for source, source_depth in sources:
        k = source.intrinsics
        u, v, z, in_front = project_points(source.pose.inverse().transform_points(world), k)
        inside = in_front & in_image(u, v, k)
        ui = np.clip(np.rint(np.nan_to_num(u)), 0, k.width - 1).astype(np.int64)
        vi = np.clip(np.rint(np.nan_to_num(v)), 0, k.height - 1).astype(np.int64)
        surface = source_depth.depth[vi, ui]
        agree = source_depth.valid[vi, ui] & (np.abs(surface - z) <= rel_tolerance * z)
        seen &= inside & agree
    return seen


def apply_cull_mask(mesh: TriangleMesh, views: Sequence[CameraView], d_max: float) -> TriangleMesh:
    """Drop triangles whose centroid no ground-truth camera could have observed."""
    if mesh.is_empty:
        return mesh
    keep = frustum_visibility(mesh.centroids(), views, d_max)
    logger.debug(f"Culling kept {int(keep.sum())} of {len(keep)} triangles")
    return mesh.submesh(keep)


def points_from_depth_maps(
    depths: Sequence[DepthMap], views: Sequence[CameraView], stride: int = 1
) -> np.ndarray:
    """World-space points backprojected from every valid (strided) depth pixel."""
    chunks = []
    for depth, view in zip(depths, views):
        rays = view.intrinsics.pixel_rays()[::stride, ::stride]
        d = depth.depth[::stride, ::stride]
        valid = depth.valid[::stride, ::stride]
        cam = rays[valid] * d[valid][:, None]
        chunks.append(view.pose.transform_points(cam))
    if not chunks:
        return np.zeros((0, 3))
    return np.concatenate(chunks)


def match_resolution(gt: DepthMap, shape: tuple[int, int]) -> DepthMap:
    """Subsample ``gt`` by the integer stride that produces ``shape``."""
    if gt.shape == tuple(shape):
        return gt
    for stride in range(2, max(gt.shape) + 1):
        if (-(-gt.height // stride), -(-gt.width // stride)) == tuple(shape):
            return DepthMap(gt.depth[::stride, ::stride], gt.valid[::stride, ::stride])
    raise ContractViolation(f"no integer stride maps ground truth {gt.shape} to {tuple(shape)}")
