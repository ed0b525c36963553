"""Keyframe selection and source-view ordering by pose distance."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from ..exceptions import ContractViolation, DataFormatError, DomainError
from .geometry import Intrinsics, Pose, pose_distance

logger = logging.getLogger(__name__)

THRESHOLD_EPSILON = 1e-9


@dataclass(frozen=True)
class Frame:
    frame_id: int
    pose: Pose
    intrinsics: Intrinsics
    timestamp: int = 0


@dataclass(frozen=True)
class Trajectory:
    frames: tuple[Frame, ...]

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise DomainError("trajectory frame ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[Frame]:
        return iter(self.frames)

    @property
    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    def get(self, frame_id: int) -> Frame:
        for frame in self.frames:
            if frame.frame_id == frame_id:
                return frame
        raise KeyError(frame_id)

    def poses(self) -> dict[int, Pose]:
        return {f.frame_id: f.pose for f in self.frames}


@dataclass(frozen=True)
class KeyframeSet:
    """Keyframe ids in trajectory order and the ordered sources of each."""

    keyframe_ids: tuple[int, ...]
    sources: Mapping[int, tuple[int, ...]]

    def sources_for(self, ref_id: int) -> tuple[int, ...]:
        return tuple(self.sources.get(ref_id, ()))


def select_keyframes(trajectory: Trajectory, t_min: float, t_max: float) -> list[int]:
    """Greedy keyframe selection.

    The first frame is always a keyframe. A later frame becomes one once its
    pose distance to the last keyframe reaches ``t_min``; one farther than
    ``t_max`` is forced in and logged as such. Decisions only look backwards.
    """
    if not 0 < t_min < t_max:
        raise DomainError(f"need 0 < t_min < t_max, got {t_min}, {t_max}")
    if len(trajectory) == 0:
        raise DomainError("cannot select keyframes from an empty trajectory")
    frames = trajectory.frames
    keyframes = [frames[0].frame_id]
    last_pose = frames[0].pose
    for frame in frames[1:]:
        distance = pose_distance(last_pose, frame.pose)
        if distance > t_max + THRESHOLD_EPSILON:
            logger.debug(f"Frame {frame.frame_id} forced as keyframe ({distance:.3f} > t_max)")
        elif distance < t_min - THRESHOLD_EPSILON:
            continue
        keyframes.append(frame.frame_id)
        last_pose = frame.pose
    return keyframes


def order_sources(
    ref_id: int,
    candidates: Sequence[int],
    n: int,
    poses: Mapping[int, Pose],
) -> list[int]:
    """Up to ``n`` candidates sorted by pose distance to the reference, ties by id."""
    if n < 1:
        raise DomainError(f"need at least one source slot, got {n}")
    if not candidates:
        raise DomainError(f"no source candidates for reference {ref_id}")
    if ref_id in candidates:
        raise ContractViolation(f"reference {ref_id} listed among its own sources")
    ref_pose = poses[ref_id]
    ranked = sorted(candidates, key=lambda cid: (pose_distance(ref_pose, poses[cid]), cid))
    return ranked[:n]


def shuffle_sources(sources: Sequence[int], seed: int) -> list[int]:
    """Seeded uniform permutation, used for the ordering ablation."""
    rng = np.random.default_rng(seed)
    return [sources[i] for i in rng.permutation(len(sources))]


def build_keyframe_set(
    trajectory: Trajectory,
    t_min: float,
    t_max: float,
    n_sources: int,
    online: bool = True,
) -> KeyframeSet:
    """Select keyframes and attach ordered sources to each.

    With ``online`` a keyframe only draws sources from earlier keyframes, as a
    live system would; otherwise any other keyframe is eligible. The first
    keyframe of an online run has no sources.
    """
    keyframe_ids = select_keyframes(trajectory, t_min, t_max)
    poses = trajectory.poses()
    sources: dict[int, tuple[int, ...]] = {}
    for index, ref_id in enumerate(keyframe_ids):
        if online:
            candidates = keyframe_ids[:index]
        else:
            candidates = [k for k in keyframe_ids if k != ref_id]
        if candidates:
            sources[ref_id] = tuple(order_sources(ref_id, candidates, n_sources, poses))
    mode = "online" if online else "offline"
    logger.info(f"Selected {len(keyframe_ids)} keyframes from {len(trajectory)} frames ({mode} sources)")
    return KeyframeSet(tuple(keyframe_ids), sources)


def format_keyframe_lines(keyframes: KeyframeSet) -> str:
    """One ``ref_id: src src ...`` line per keyframe."""
    lines = []
    for ref_id in keyframes.keyframe_ids:
        srcs = " ".join(str(s) for s in keyframes.sources_for(ref_id))
        lines.append(f"{ref_id}: {srcs}".rstrip())
    return "\n".join(lines) + ("\n" if lines else "")


def parse_keyframe_lines(text: str, path: Optional[str] = None) -> KeyframeSet:
    ids: list[int] = []
    sources: dict[int, tuple[int, ...]] = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            head, sep, tail = stripped.partition(":")
            try:
                if not sep:
                    raise ValueError("missing ':'")
                ref_id = int(head)
                srcs = tuple(int(tok) for tok in tail.split())
            except ValueError as e:
                raise DataFormatError(path or "<keyframes>", f"bad keyframe line: {e}", offset)
            ids.append(ref_id)
            if srcs:
                sources[ref_id] = srcs
        offset += len(line.encode("utf-8"))
    return KeyframeSet(tuple(ids), sources)
