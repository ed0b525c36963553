"""
Toy-scale training of the cost-volume MLP and the ablation matrix.

A training step draws random crops from the training samples, builds the
metadata volume for each crop, scores it with the MLP, turns scores into depth
with the soft-argmax head and backpropagates the supervised loss through all
three. The network with the lowest validation loss is the one returned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..exceptions import DomainError, EmptyResultError, TrainingError
from .evaluation import DepthMetrics, aggregate_depth_metrics, depth_metrics
from .features import FeatureMap, extract_features
from .geometry import CameraView
from .keyframing import KeyframeSet, Trajectory, build_keyframe_set, shuffle_sources
from .losses import DepthMap, LossBreakdown, LossWeights, NormalMap, SourceDepth, supervised_loss
from .synth import RenderedView, Scene, render_depth
from .tinynet import AdamWState, Mlp, adamw_step
from .volume import (
    ChannelConfig,
    CostSlice,
    DepthPlanes,
    MetadataVolume,
    SweepView,
    build_metadata_volume,
    cost_to_depth,
    cost_to_depth_backward,
    make_depth_planes,
    predict_depth,
)

logger = logging.getLogger(__name__)

MAX_SOURCES = 8
ABLATION_AXES = ("channels", "ordering", "n_views", "zero_cv")
VIEW_COUNTS = (1, 2, 4, 8)
CHANNEL_PROGRESSION = ("dots_only", "dots_feats_mask_depth", "plus_ray_angle", "full")


class TrainConfig(BaseModel):
    """Everything that determines a training run, seed included."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    channels: Literal["dots_only", "dots_feats_mask_depth", "plus_ray_angle", "full"] = "full"
    reducer: Literal["mlp", "dot_sum", "zero"] = "mlp"
    n_sources: int = Field(8, ge=1, le=MAX_SOURCES)
    n_planes: int = Field(64, ge=2)
    d_min: float = Field(0.25, gt=0)
    d_max: float = Field(5.0, gt=0)
    temperature: float = Field(1.0, gt=0)
    extractor: Literal["oracle", "patch"] = "oracle"
    feature_dim: int = Field(16, ge=2)
    patch_size: int = Field(5, ge=3)
    lr: float = Field(1e-4, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    steps: int = Field(500, ge=1)
    batch_size: int = Field(1, ge=1)
    crop_size: int = Field(32, ge=8)
    max_samples: int = Field(200, ge=2)
    hidden: int = Field(64, ge=1)
    n_hidden: int = Field(2, ge=0)
    slope: float = Field(0.01, ge=0)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    val_every: int = Field(25, ge=1)
    ordering: Literal["pose_sorted", "shuffled"] = "pose_sorted"
    w_grad: float = Field(1.0, ge=0)
    w_normals: float = Field(1.0, ge=0)
    w_mv: float = Field(0.2, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if not self.d_min < self.d_max:
            raise ValueError(f"d_min ({self.d_min}) must be below d_max ({self.d_max})")
        if self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd, got {self.patch_size}")
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(grad=self.w_grad, normals=self.w_normals, mv=self.w_mv)

    @property
    def channel_config(self) -> ChannelConfig:
        return ChannelConfig.preset(self.channels)

    def planes(self) -> DepthPlanes:
        return make_depth_planes(self.d_min, self.d_max, self.n_planes)

    def feature_width(self) -> int:
        return self.feature_dim if self.extractor == "oracle" else self.patch_size**2


# Datasets


@dataclass(frozen=True, eq=False)
class RenderedKeyframes:
    """Rendered ground truth and features for every keyframe of a trajectory."""

    keyframes: KeyframeSet
    views: Mapping[int, RenderedView]
    features: Mapping[int, FeatureMap]


@dataclass(frozen=True, eq=False)
class TrainingSample:
    ref_id: int
    source_ids: tuple[int, ...]
    ref: SweepView
    sources: tuple[SweepView, ...]
    gt: DepthMap
    gt_normals: NormalMap
    source_depths: tuple[SourceDepth, ...]


def render_keyframes(
    scene: Scene,
    trajectory: Trajectory,
    cfg: TrainConfig,
    t_min: float,
    t_max: float,
) -> RenderedKeyframes:
    """Render every keyframe once; sources are drawn from all other keyframes."""
    keyframes = build_keyframe_set(trajectory, t_min, t_max, MAX_SOURCES, online=False)
    views: dict[int, RenderedView] = {}
    features: dict[int, FeatureMap] = {}
    for frame_id in keyframes.keyframe_ids:
        frame = trajectory.get(frame_id)
        rendered = render_depth(scene, CameraView(frame.pose, frame.intrinsics))
        views[frame_id] = rendered
        features[frame_id] = extract_features(
            cfg.extractor,
            cfg.feature_dim,
            cfg.patch_size,
            rendered.view,
            image=rendered.image,
            scene=scene,
            view_id=frame_id,
        )
    logger.info(f"Rendered {len(views)} keyframes ({cfg.extractor} features)")
    return RenderedKeyframes(keyframes, views, features)


def assemble_samples(rendered: RenderedKeyframes, cfg: TrainConfig) -> list[TrainingSample]:
    """One sample per keyframe that has sources, in keyframe order.

    The ``n_sources`` nearest sources are kept; with ``shuffled`` ordering
    their order is permuted with a seed derived from the reference id.
    """
    samples = []
    for ref_id in rendered.keyframes.keyframe_ids:
        source_ids = rendered.keyframes.sources_for(ref_id)[: cfg.n_sources]
        if not source_ids:
            continue
        if cfg.ordering == "shuffled":
            source_ids = tuple(shuffle_sources(source_ids, cfg.seed + ref_id))
        ref = rendered.views[ref_id]
        samples.append(
            TrainingSample(
                ref_id=ref_id,
                source_ids=tuple(source_ids),
                ref=SweepView(rendered.features[ref_id], ref.pose, ref.intrinsics),
                sources=tuple(
                    SweepView(rendered.features[s], rendered.views[s].pose, rendered.views[s].intrinsics)
                    for s in source_ids
                ),
                gt=ref.depth,
                gt_normals=ref.normals,
                source_depths=tuple(
                    SourceDepth(rendered.views[s].pose, rendered.views[s].intrinsics, rendered.views[s].depth)
                    for s in source_ids
                ),
            )
        )
        if len(samples) >= cfg.max_samples:
            break
    return samples


def build_dataset(
    scene: Scene, trajectory: Trajectory, cfg: TrainConfig, t_min: float, t_max: float
) -> list[TrainingSample]:
    return assemble_samples(render_keyframes(scene, trajectory, cfg, t_min, t_max), cfg)


def split_dataset(
    samples: Sequence[TrainingSample], val_fraction: float, seed: int
) -> tuple[list[TrainingSample], list[TrainingSample]]:
    """Seeded train/validation split; both halves keep their original order."""
    if len(samples) < 2:
        raise DomainError(f"need at least two samples to split, got {len(samples)}")
    n_val = min(len(samples) - 1, max(1, int(round(val_fraction * len(samples)))))
    picked = np.random.default_rng(seed).permutation(len(samples))
    val_index = set(picked[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_index]
    val = [s for i, s in enumerate(samples) if i in val_index]
    return train, val


def hold_out_split(
    samples: Sequence[TrainingSample], fraction: float, seed: int
) -> tuple[list[TrainingSample], list[TrainingSample], list[TrainingSample]]:
    """Train, validation and test portions, pairwise disjoint.

    The test portion is cut first; validation then comes out of the rest, so
    checkpoint selection never sees a sample that is scored afterwards.
    """
    if len(samples) < 3:
        raise DomainError(f"need at least three samples for a held-out split, got {len(samples)}")
    rest, test = split_dataset(samples, fraction, seed)
    train, val = split_dataset(rest, fraction, seed + 1)
    return train, val, test


# Losses through the whole chain


@dataclass(frozen=True, eq=False)
class CropBatch:
    """Samples with their crop windows and prebuilt volumes."""

    samples: tuple[TrainingSample, ...]
    windows: tuple[tuple[int, int, int, int], ...]
    volumes: tuple[MetadataVolume, ...]
    planes: DepthPlanes
    cfg: TrainConfig


def make_batch(
    samples: Sequence[TrainingSample],
    windows: Sequence[tuple[int, int, int, int]],
    cfg: TrainConfig,
    planes: Optional[DepthPlanes] = None,
) -> CropBatch:
    planes = planes or cfg.planes()
    volumes = tuple(
        build_metadata_volume(
            s.ref, s.sources, planes, cfg.channel_config, max_sources=cfg.n_sources, window=w
        )
        for s, w in zip(samples, windows)
    )
    return CropBatch(tuple(samples), tuple(windows), volumes, planes, cfg)


def _check_finite(step: int, breakdown: LossBreakdown) -> None:
    if not np.isfinite(breakdown.total):
        for name, value in breakdown.components().items():
            if not np.isfinite(value):
                raise TrainingError(step, name, value)
        raise TrainingError(step, "total", breakdown.total)


def batch_loss(net: Mlp, batch: CropBatch, step: int = -1) -> tuple[LossBreakdown, list[np.ndarray]]:
    """Mean supervised loss over the batch and its parameter gradients."""
    cfg = batch.cfg
    totals = np.zeros(5)
    grads = [np.zeros_like(p) for p in net.parameters()]
    for sample, window, volume in zip(batch.samples, batch.windows, batch.volumes):
        scores, tape = net.forward(volume.data.reshape(-1, volume.channels))
        if not np.all(np.isfinite(scores)):
            raise TrainingError(step, "cost", float("nan"))
        cost = CostSlice(scores.reshape(volume.data.shape[:3]))
        pred = cost_to_depth(cost, batch.planes, cfg.temperature)
        breakdown, grad_depth = supervised_loss(
            pred.depth,
            sample.gt.crop(window),
            sample.gt_normals.crop(window),
            sample.ref.pose,
            sample.ref.intrinsics,
            sample.source_depths,
            cfg.weights,
            offset=(window[0], window[1]),
        )
        _check_finite(step, breakdown)
        grad_cost = cost_to_depth_backward(cost, batch.planes, grad_depth, cfg.temperature)
        for acc, g in zip(grads, net.backward(tape, grad_cost.reshape(-1)).params):
            acc += g
        totals += [breakdown.total, breakdown.depth, breakdown.grad, breakdown.normals, breakdown.mv]
    n = len(batch.samples)
    totals /= n
    return LossBreakdown(*map(float, totals)), [g / n for g in grads]


def end_to_end_loss(params: np.ndarray, batch: CropBatch, net: Mlp) -> tuple[float, np.ndarray]:
    """Total loss and flat gradient for flat network parameters."""
    net.set_flat_parameters(params)
    breakdown, grads = batch_loss(net, batch)
    return breakdown.total, np.concatenate([g.ravel() for g in grads])


# Training


@dataclass(frozen=True, eq=False)
class TrainResult:
    net: Mlp
    curve: list[LossBreakdown]
    val_curve: list[tuple[int, float]]
    best_step: int
    best_val_loss: float
    seed: int

    def loss_log(self) -> str:
        """One ``step L L_depth L_grad L_normals L_mv`` line per training step."""
        return "".join(b.as_log_line(i) + "\n" for i, b in enumerate(self.curve, start=1))

    def val_log(self) -> str:
        return "".join(f"{step} {value!r}\n" for step, value in self.val_curve)


def _random_window(rng: np.random.Generator, sample: TrainingSample, size: int):
    height, width = sample.gt.shape
    u0 = int(rng.integers(0, width - size + 1))
    v0 = int(rng.integers(0, height - size + 1))
    return (u0, v0, size, size)


def _centre_window(sample: TrainingSample, size: int):
    height, width = sample.gt.shape
    return ((width - size) // 2, (height - size) // 2, size, size)


def validation_loss(net: Mlp, batch: CropBatch) -> float:
    breakdown, _ = batch_loss(net, batch)
    return breakdown.total


def train(
    train_set: Sequence[TrainingSample],
    val_set: Sequence[TrainingSample],
    cfg: TrainConfig,
    net: Optional[Mlp] = None,
) -> TrainResult:
    """AdamW on the supervised loss; returns the lowest-validation-loss network."""
    if not train_set or not val_set:
        raise DomainError("training needs non-empty train and validation sets")
    if cfg.reducer != "mlp":
        raise DomainError(f"only the mlp reducer has parameters to train, got '{cfg.reducer}'")
    size = cfg.crop_size
    height, width = train_set[0].gt.shape
    if size > min(height, width):
        raise DomainError(f"crop {size} does not fit {width}x{height} images")

    planes = cfg.planes()
    in_dim = build_metadata_volume(
        train_set[0].ref,
        train_set[0].sources,
        planes,
        cfg.channel_config,
        max_sources=cfg.n_sources,
        window=(0, 0, 1, 1),
    ).channels
    if net is None:
        net = Mlp.create(in_dim, cfg.hidden, cfg.n_hidden, cfg.slope, seed=cfg.seed)
    state = AdamWState.for_parameters(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    val_batch = make_batch(val_set, [_centre_window(s, size) for s in val_set], cfg, planes)

    best_net = net.copy()
    best_val = validation_loss(net, val_batch)
    best_step = 0
    val_curve = [(0, best_val)]
    curve: list[LossBreakdown] = []
    logger.info(
        f"Training {net.parameter_count}-parameter MLP on {len(train_set)} samples "
        f"({len(val_set)} held out) for {cfg.steps} steps; initial val loss {best_val:.4f}"
    )

    for step in range(1, cfg.steps + 1):
        picks = rng.integers(0, len(train_set), size=cfg.batch_size)
        samples = [train_set[i] for i in picks]
        windows = [_random_window(rng, s, size) for s in samples]
        breakdown, grads = batch_loss(net, make_batch(samples, windows, cfg, planes), step)
        curve.append(breakdown)
        logger.debug(breakdown.as_log_line(step))
        params, state = adamw_step(net.parameters(), grads, state)
        net.set_parameters(params)

        if step % cfg.val_every == 0 or step == cfg.steps:
            val = validation_loss(net, val_batch)
            val_curve.append((step, val))
            if val < best_val:
                best_val, best_step, best_net = val, step, net.copy()
            logger.info(f"Step {step}: train {breakdown.total:.4f}, val {val:.4f} (best {best_val:.4f})")

    logger.info(f"Kept network from step {best_step} with validation loss {best_val:.4f}")
    return TrainResult(best_net, curve, val_curve, best_step, best_val, cfg.seed)


# Evaluation and ablation


def evaluate_depth(
    samples: Sequence[TrainingSample], cfg: TrainConfig, net: Optional[Mlp] = None
) -> DepthMetrics:
    """Full-image depth metrics averaged over samples."""
    planes = cfg.planes()
    metrics = []
    for sample in samples:
        pred = predict_depth(
            sample.ref,
            sample.sources,
            planes,
            reducer=cfg.reducer,
            net=net,
            config=cfg.channel_config,
            max_sources=cfg.n_sources,
            temperature=cfg.temperature,
        )
        try:
            metrics.append(depth_metrics(pred, sample.gt))
        except EmptyResultError:
            logger.warning(f"Keyframe {sample.ref_id} has no valid ground truth, skipped")
    return aggregate_depth_metrics(metrics)


@dataclass(frozen=True)
class AblationRow:
    name: str
    cfg: TrainConfig
    metrics: DepthMetrics


@dataclass(frozen=True)
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def row(self, name: str) -> AblationRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def ordering_gap(self) -> Optional[float]:
        """How much less the metadata model loses to shuffling than the dot-only one."""
        names = {r.name for r in self.rows}
        wanted = {f"ordering/{tag}_{suffix}" for tag in ("dots", "full") for suffix in ("sorted", "shuffled")}
        if not wanted <= names:
            return None

        def drop(tag: str) -> float:
            shuffled = self.row(f"ordering/{tag}_shuffled").metrics.abs_rel
            return shuffled - self.row(f"ordering/{tag}_sorted").metrics.abs_rel

        return drop("dots") - drop("full")

    def render(self) -> str:
        header = (
            f"{'variant':<30} {'reducer':<8} {'channels':<22} {'N':>2} {'ordering':<11} "
            f"{'abs_diff':>9} {'abs_rel':>9} {'sq_rel':>9} {'rmse':>9} {'d<1.05':>7} {'d<1.25':>7}"
        )
        lines = [header, "-" * len(header)]
        for r in self.rows:
            m = r.metrics
            lines.append(
                f"{r.name:<30} {r.cfg.reducer:<8} {r.cfg.channels:<22} {r.cfg.n_sources:>2} "
                f"{r.cfg.ordering:<11} {m.abs_diff:>9.4f} {m.abs_rel:>9.4f} {m.sq_rel:>9.4f} "
                f"{m.rmse:>9.4f} {m.delta_1_05:>7.2f} {m.delta_1_25:>7.2f}"
            )
        gap = self.ordering_gap()
        if gap is not None:
            lines.append(f"ordering difference of differences (abs_rel): {gap:.4f}")
        return "\n".join(lines) + "\n"


def ablation_variants(base: TrainConfig, axes: Sequence[str]) -> list[tuple[str, TrainConfig]]:
    unknown = set(axes) - set(ABLATION_AXES)
    if unknown:
        raise DomainError(f"unknown ablation axes {sorted(unknown)}, expected a subset of {ABLATION_AXES}")
    variants = [("base", base)]
    if "channels" in axes:
        for preset in CHANNEL_PROGRESSION:
            variant = base.model_copy(update={"reducer": "mlp", "channels": preset})
            variants.append((f"channels/{preset}", variant))
    if "ordering" in axes:
        for channels, tag in (("dots_only", "dots"), ("full", "full")):
            for ordering, suffix in (("pose_sorted", "sorted"), ("shuffled", "shuffled")):
                variants.append(
                    (
                        f"ordering/{tag}_{suffix}",
                        base.model_copy(
                            update={"reducer": "mlp", "channels": channels, "ordering": ordering}
                        ),
                    )
                )
    if "n_views" in axes:
        for n in VIEW_COUNTS:
            variants.append((f"n_views/{n}", base.model_copy(update={"n_sources": n})))
    if "zero_cv" in axes:
        variants.append(("zero_cv", base.model_copy(update={"reducer": "zero"})))
    return variants


def run_ablation_matrix(
    rendered: RenderedKeyframes,
    base: TrainConfig,
    axes: Sequence[str] = ABLATION_AXES,
    eval_samples: Optional[int] = None,
) -> AblationTable:
    """Train and evaluate every variant on the same split with the same seeds.

    Scores come from a test portion kept apart from both training and the
    validation set that picks the best checkpoint.
    """
    rows = []
    for name, cfg in ablation_variants(base, axes):
        samples = assemble_samples(rendered, cfg)
        train_set, val_set, test_set = hold_out_split(samples, cfg.val_fraction, cfg.seed)
        held_out = test_set[:eval_samples] if eval_samples else test_set
        logger.info(
            f"Ablation variant {name}: {cfg.reducer}, {cfg.channels}, N={cfg.n_sources}, {cfg.ordering}"
        )
        net = train(train_set, val_set, cfg).net if cfg.reducer == "mlp" else None
        rows.append(AblationRow(name, cfg, evaluate_depth(held_out, cfg, net)))
    return AblationTable(rows)


__all__ = [
    "ABLATION_AXES",
    "AblationRow",
    "AblationTable",
    "CropBatch",
    "RenderedKeyframes",
    "TrainConfig",
    "TrainResult",
    "TrainingSample",
    "ablation_variants",
    "assemble_samples",
    "batch_loss",
    "build_dataset",
    "end_to_end_loss",
    "evaluate_depth",
    "hold_out_split",
    "make_batch",
    "render_keyframes",
    "run_ablation_matrix",
    "split_dataset",
    "train",
    "validation_loss",
]
