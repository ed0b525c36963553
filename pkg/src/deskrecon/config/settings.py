import json
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

from pydantic import Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from ..utils.fileio import atomic_write_text

RUN_CONFIG_NAME = "run_config.json"


class RunConfig(BaseSettings):
    """Run settings shared by every command"""

    model_config = SettingsConfigDict(
        env_prefix="DESKRECON_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="forbid",
    )

    # System Configuration
    seed: int = Field(0, ge=0)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    # Camera
    image_width: int = Field(64, ge=8)
    image_height: int = Field(48, ge=8)
    fx: float = Field(48.0, gt=0)
    fy: float = Field(48.0, gt=0)
    cx: float = 31.5
    cy: float = 23.5

    # Synthetic Scene
    room_extents: tuple[float, float, float] = (5.0, 3.0, 5.0)
    n_boxes: int = Field(4, ge=0)
    n_spheres: int = Field(3, ge=0)
    texture_correlation_length: float = Field(0.25, gt=0)
    occluder_density: float = Field(0.0, ge=0, le=1)
    keepout_radius: float = Field(1.0, ge=0)

    # Trajectory
    n_frames: int = Field(60, ge=1)
    motion: Literal["orbit", "line", "jitter"] = "orbit"
    orbit_radius: float = Field(0.5, gt=0)
    line_step: float = Field(0.05, gt=0)

    # Keyframes
    t_min: float = Field(0.125, gt=0)
    t_max: float = Field(0.325, gt=0)
    online_sources: bool = True

    # Plane Sweep
    n_planes: int = Field(64, ge=2)
    d_min: float = Field(0.25, gt=0)
    d_max: float = Field(5.0, gt=0)
    n_sources: int = Field(8, ge=1, le=8)
    feature_dim: int = Field(16, ge=2)
    extractor: Literal["oracle", "patch"] = "oracle"
    patch_size: int = Field(5, ge=3)
    feature_stride: int = Field(1, ge=1)
    temperature: float = Field(1.0, gt=0)
    reducer: Literal["dot_sum", "mlp", "zero"] = "dot_sum"
    channels: Literal["dots_only", "dots_feats_mask_depth", "plus_ray_angle", "full"] = "full"
    rows_per_chunk: int = Field(8, ge=1)
    depth_source: Literal["estimate", "gt"] = "estimate"

    # Training
    lr: float = Field(1e-4, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    train_steps: int = Field(500, ge=1)
    train_samples: int = Field(200, ge=2)
    batch_size: int = Field(1, ge=1)
    crop_size: int = Field(32, ge=8)
    hidden: int = Field(64, ge=1)
    n_hidden: int = Field(2, ge=0)
    leaky_slope: float = Field(0.01, ge=0)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    val_every: int = Field(25, ge=1)
    source_ordering: Literal["pose_sorted", "shuffled"] = "pose_sorted"
    w_grad: float = Field(1.0, ge=0)
    w_normals: float = Field(1.0, ge=0)
    w_mv: float = Field(0.2, ge=0)

    # Fusion
    voxel_size: float = Field(0.04, gt=0)
    truncation_voxels: float = Field(3.0, ge=1)
    max_weight: float = Field(100.0, gt=0)
    queue_size: int = Field(4, ge=1)

    # Benchmark
    bench_width: int = Field(256, ge=8)
    bench_height: int = Field(192, ge=8)
    bench_frames: int = Field(10, ge=1)
    bench_repeats: int = Field(3, ge=1)

    # Evaluation
    mesh_threshold_cm: float = Field(5.0, gt=0)
    mesh_samples: int = Field(200_000, ge=1)
    cull_far: float = Field(5.0, gt=0)

    # Ablation
    ablation_axes: list[Literal["channels", "ordering", "n_views", "zero_cv"]] = [
        "channels",
        "ordering",
        "n_views",
        "zero_cv",
    ]
    ablation_eval_samples: int = Field(20, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "RunConfig":
        if not self.d_min < self.d_max:
            raise ValueError(f"d_min ({self.d_min}) must be below d_max ({self.d_max})")
        if not self.t_min < self.t_max:
            raise ValueError(f"t_min ({self.t_min}) must be below t_max ({self.t_max})")
        if self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd, got {self.patch_size}")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise ValueError("principal point must lie inside the image")
        if self.crop_size > min(self.image_width, self.image_height):
            raise ValueError("crop_size cannot exceed the image size")
        return self

    @property
    def truncation(self) -> float:
        return self.truncation_voxels * self.voxel_size

    # Derived domain configs; imported lazily so the settings module stays light

    def intrinsics(self):
        from ..core.geometry import Intrinsics

        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.image_width, self.image_height)

    def channel_config(self):
        from ..core.volume import ChannelConfig

        return ChannelConfig.preset(self.channels)

    def scene_config(self):
        from ..core.synth import SceneConfig

        return SceneConfig(
            seed=self.seed,
            room_extents=tuple(self.room_extents),
            n_boxes=self.n_boxes,
            n_spheres=self.n_spheres,
            texture_correlation_length=self.texture_correlation_length,
            occluder_density=self.occluder_density,
            keepout_radius=self.keepout_radius,
        )

    def train_config(self, **updates):
        from ..core.training import TrainConfig

        cfg = TrainConfig(
            channels=self.channels,
            reducer=self.reducer,
            extractor=self.extractor,
            feature_dim=self.feature_dim,
            patch_size=self.patch_size,
            batch_size=self.batch_size,
            max_samples=self.train_samples,
            n_sources=self.n_sources,
            n_planes=self.n_planes,
            d_min=self.d_min,
            d_max=self.d_max,
            temperature=self.temperature,
            lr=self.lr,
            weight_decay=self.weight_decay,
            steps=self.train_steps,
            crop_size=self.crop_size,
            hidden=self.hidden,
            n_hidden=self.n_hidden,
            slope=self.leaky_slope,
            val_fraction=self.val_fraction,
            val_every=self.val_every,
            ordering=self.source_ordering,
            w_grad=self.w_grad,
            w_normals=self.w_normals,
            w_mv=self.w_mv,
            seed=self.seed,
        )
        return cfg.model_copy(update=updates) if updates else cfg

    # Persistence

    @classmethod
    def load(
        cls, path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None
    ) -> "RunConfig":
        """Defaults < environment < JSON file < explicit overrides."""
        values: dict[str, Any] = {}
        if path is not None:
            values.update(json.loads(Path(path).read_text(encoding="utf-8")))
        values.update(overrides or {})
        return cls(**values)

    def save(self, directory: Path) -> Path:
        target = Path(directory) / RUN_CONFIG_NAME
        atomic_write_text(target, self.model_dump_json(indent=2) + "\n")
        return target


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    """Turn ``key=value`` strings into a dict; values are JSON when they parse as JSON."""
    overrides: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"override '{pair}' is not of the form key=value")
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


__all__ = ["RunConfig", "RUN_CONFIG_NAME", "ValidationError", "parse_overrides"]
