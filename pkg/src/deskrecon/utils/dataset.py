"""
Trajectory dataset directory layout.

    <root>/intrinsics.txt
    <root>/scene.json                 scene parameters (regenerates the scene)
    <root>/keyframes.txt              optional, ``ref: src src ...`` lines
    <root>/frames/NNNNNN.pose.txt     camera-to-world, 4x4 row major
    <root>/frames/NNNNNN.pgm          8-bit luminance
    <root>/frames/NNNNNN.depth.pgm    16-bit millimetre depth, 0 = invalid
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..core.geometry import Intrinsics
from ..core.keyframing import Frame, KeyframeSet, Trajectory, format_keyframe_lines, parse_keyframe_lines
from ..core.losses import DepthMap
from ..core.synth import RenderedView, SceneConfig
from ..exceptions import DataFormatError
from .fileio import atomic_write_text
from .formats import (
    read_depth_pgm,
    read_image_pgm,
    read_intrinsics,
    read_pose,
    write_depth_pgm,
    write_image_pgm,
    write_intrinsics,
    write_pose,
)

logger = logging.getLogger(__name__)

FRAMES_DIR = "frames"
POSE_SUFFIX = ".pose.txt"


def frame_stem(frame_id: int) -> str:
    return f"{frame_id:06d}"


@dataclass(frozen=True)
class TrajectoryDataset:
    root: Path
    intrinsics: Intrinsics
    trajectory: Trajectory
    keyframes: Optional[KeyframeSet] = None
    scene_config: Optional[SceneConfig] = None

    def _frame_path(self, frame_id: int, suffix: str) -> Path:
        return self.root / FRAMES_DIR / f"{frame_stem(frame_id)}{suffix}"

    def image(self, frame_id: int) -> np.ndarray:
        return read_image_pgm(self._frame_path(frame_id, ".pgm"))

    def depth(self, frame_id: int) -> DepthMap:
        return read_depth_pgm(self._frame_path(frame_id, ".depth.pgm"))

    def has_depth(self, frame_id: int) -> bool:
        return self._frame_path(frame_id, ".depth.pgm").is_file()


def write_dataset(
    root: str | Path,
    views: Iterable[tuple[int, RenderedView]],
    intrinsics: Intrinsics,
    scene_config: Optional[SceneConfig] = None,
    keyframes: Optional[KeyframeSet] = None,
) -> Path:
    root = Path(root)
    frames = root / FRAMES_DIR
    frames.mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / "intrinsics.txt", intrinsics)
    count = 0
    for frame_id, view in views:
        stem = frame_stem(frame_id)
        write_pose(frames / f"{stem}{POSE_SUFFIX}", view.pose)
        write_image_pgm(frames / f"{stem}.pgm", view.image)
        write_depth_pgm(frames / f"{stem}.depth.pgm", view.depth)
        count += 1
    if scene_config is not None:
        atomic_write_text(root / "scene.json", json.dumps(asdict(scene_config), indent=2) + "\n")
    if keyframes is not None:
        write_keyframes(root, keyframes)
    logger.info(f"Wrote {count} frames to {root}")
    return root


def write_keyframes(root: str | Path, keyframes: KeyframeSet) -> None:
    atomic_write_text(Path(root) / "keyframes.txt", format_keyframe_lines(keyframes))


def _frame_id(path: Path) -> int:
    stem = path.name[: -len(POSE_SUFFIX)]
    if not stem.isdigit():
        raise DataFormatError(path, "frame file names must be numeric ids")
    return int(stem)


def load_dataset(root: str | Path) -> TrajectoryDataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: dataset directory not found")
    intrinsics = read_intrinsics(root / "intrinsics.txt")
    pose_files = sorted((root / FRAMES_DIR).glob(f"*{POSE_SUFFIX}"), key=_frame_id)
    if not pose_files:
        raise DataFormatError(root / FRAMES_DIR, "no pose files found")
    frames = tuple(
        Frame(frame_id=_frame_id(p), pose=read_pose(p), intrinsics=intrinsics, timestamp=_frame_id(p))
        for p in pose_files
    )

    keyframes = None
    keyframe_path = root / "keyframes.txt"
    if keyframe_path.is_file():
        keyframes = parse_keyframe_lines(keyframe_path.read_text(encoding="utf-8"), str(keyframe_path))

    scene_config = None
    scene_path = root / "scene.json"
    if scene_path.is_file():
        try:
            fields = json.loads(scene_path.read_text(encoding="utf-8"))
            fields["room_extents"] = tuple(fields["room_extents"])
            scene_config = SceneConfig(**fields)
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataFormatError(scene_path, f"bad scene description: {e}") from e

    logger.info(f"Loaded {len(frames)} frames from {root}")
    return TrajectoryDataset(root, intrinsics, Trajectory(frames), keyframes, scene_config)
