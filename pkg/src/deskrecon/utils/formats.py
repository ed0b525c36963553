"""
Readers and writers for every on-disk format.

Text floats are written with ``repr`` (shortest round-trip decimal), so a
write followed by a read gives back the same values bit for bit. All writes
go through :mod:`deskrecon.utils.fileio` and are atomic.
"""

from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Mapping

import cv2
import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from ..core.fusion import LatencyStats, TriangleMesh
from ..core.geometry import Intrinsics, Pose
from ..core.losses import DepthMap
from ..exceptions import DataFormatError, DomainError
from .fileio import atomic_open, atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

DEPTH_SCALE = 1000.0  # millimetres per metre
MAX_DEPTH_MM = 65535
_TOKEN = re.compile(rb"\S+")


def _read(path: str | Path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    return path.read_bytes()


def _numbers(path, raw: bytes, expected: int) -> list[tuple[int, bytes]]:
    tokens = [(m.start(), m.group()) for m in _TOKEN.finditer(raw)]
    if len(tokens) < expected:
        raise DataFormatError(path, f"expected {expected} numbers, found {len(tokens)}", len(raw))
    if len(tokens) > expected:
        raise DataFormatError(
            path, f"expected {expected} numbers, found {len(tokens)}", tokens[expected][0]
        )
    return tokens


def _float(path, offset: int, token: bytes) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataFormatError(path, f"'{token.decode(errors='replace')}' is not a number", offset)
    if not np.isfinite(value):
        raise DataFormatError(path, "non-finite value", offset)
    return value


# Poses


def format_pose(pose: Pose) -> str:
    return "".join(" ".join(repr(float(x)) for x in row) + "\n" for row in pose.matrix())


def write_pose(path: str | Path, pose: Pose) -> None:
    atomic_write_text(path, format_pose(pose))


def read_pose(path: str | Path) -> Pose:
    """Camera-to-world pose from 16 whitespace-separated numbers, row major."""
    raw = _read(path)
    tokens = _numbers(path, raw, 16)
    values = np.array([_float(path, offset, tok) for offset, tok in tokens]).reshape(4, 4)
    if not np.array_equal(values[3], [0.0, 0.0, 0.0, 1.0]):
        raise DataFormatError(path, "last row must be 0 0 0 1", tokens[12][0])
    try:
        return Pose.from_matrix(values)
    except DomainError as e:
        raise DataFormatError(path, str(e), 0) from e


# Intrinsics


def write_intrinsics(path: str | Path, k: Intrinsics) -> None:
    atomic_write_text(path, f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")


def read_intrinsics(path: str | Path) -> Intrinsics:
    """``fx fy cx cy width height`` on one line."""
    raw = _read(path)
    tokens = _numbers(path, raw, 6)
    fx, fy, cx, cy = (_float(path, offset, tok) for offset, tok in tokens[:4])
    size = []
    for offset, tok in tokens[4:]:
        if not tok.isdigit():
            text = tok.decode(errors="replace")
            raise DataFormatError(path, f"image size '{text}' is not an integer", offset)
        size.append(int(tok))
    try:
        return Intrinsics(fx, fy, cx, cy, size[0], size[1])
    except DomainError as e:
        raise DataFormatError(path, str(e), 0) from e


# PGM images


def _encode_pgm(path, pixels: np.ndarray) -> None:
    ok, buffer = cv2.imencode(".pgm", pixels)
    if not ok:
        raise DomainError(f"could not encode {pixels.dtype} image for {path}")
    atomic_write_bytes(path, buffer.tobytes())


def _decode_pgm(path, expected_dtype) -> np.ndarray:
    raw = _read(path)
    if not raw.startswith(b"P5"):
        raise DataFormatError(path, "not a binary PGM (P5) file", 0)
    pixels = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise DataFormatError(path, "corrupt or truncated PGM data", len(raw))
    if pixels.dtype != expected_dtype or pixels.ndim != 2:
        raise DataFormatError(path, f"expected a single-channel {np.dtype(expected_dtype).name} PGM", 0)
    return pixels


def write_depth_pgm(path: str | Path, depth: DepthMap) -> None:
    """16-bit PGM in millimetres; invalid pixels are 0."""
    mm = np.rint(np.where(depth.valid, depth.depth, 0.0) * DEPTH_SCALE)
    if mm.max(initial=0) > MAX_DEPTH_MM:
        raise DomainError(f"depth beyond {MAX_DEPTH_MM / DEPTH_SCALE} m cannot be stored in {path}")
    mm = np.where(depth.valid & (mm < 1), 1, mm)
    _encode_pgm(path, mm.astype(np.uint16))


def read_depth_pgm(path: str | Path) -> DepthMap:
    mm = _decode_pgm(path, np.uint16)
    return DepthMap(mm.astype(np.float64) / DEPTH_SCALE, mm > 0)


def write_image_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit grey image from values in ``[0, 1]``."""
    _encode_pgm(path, np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8))


def read_image_pgm(path: str | Path) -> np.ndarray:
    return _decode_pgm(path, np.uint8).astype(np.float64) / 255.0


# Meshes


def write_ply(path: str | Path, mesh: TriangleMesh) -> None:
    """ASCII PLY with double-precision vertices, optional normals and a face list."""
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if mesh.normals is not None:
        fields += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    vertices = np.empty(len(mesh.vertices), dtype=fields)
    for i, axis in enumerate("xyz"):
        vertices[axis] = mesh.vertices[:, i]
        if mesh.normals is not None:
            vertices["n" + axis] = mesh.normals[:, i]
    faces = np.empty(len(mesh.triangles), dtype=[("vertex_indices", "O")])
    for i, tri in enumerate(mesh.triangles.astype(np.int32)):
        faces[i] = (tri,)
    data = PlyData(
        [
            PlyElement.describe(vertices, "vertex"),
            PlyElement.describe(
                faces, "face", len_types={"vertex_indices": "u1"}, val_types={"vertex_indices": "i4"}
            ),
        ],
        text=True,
        comments=["deskrecon mesh"],
    )
    with atomic_open(path) as handle:
        data.write(handle)
    logger.info(f"Wrote mesh with {len(mesh.vertices)} vertices and {len(mesh.triangles)} faces to {path}")


def read_ply(path: str | Path) -> TriangleMesh:
    _read(path)
    try:
        data = PlyData.read(str(path))
    except PlyParseError as e:
        raise DataFormatError(path, f"malformed PLY: {e}") from e
    except (ValueError, IndexError) as e:
        raise DataFormatError(path, f"malformed PLY: {e}") from e
    names = {element.name for element in data.elements}
    if "vertex" not in names:
        raise DataFormatError(path, "PLY has no vertex element", 0)
    vertex = data["vertex"].data
    vertices = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=-1).astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= set(vertex.dtype.names):
        normals = np.stack([vertex["nx"], vertex["ny"], vertex["nz"]], axis=-1).astype(np.float64)
    triangles = np.zeros((0, 3), dtype=np.int64)
    if "face" in names and len(data["face"].data):
        faces = data["face"].data["vertex_indices"]
        if any(len(f) != 3 for f in faces):
            raise DataFormatError(path, "only triangular faces are supported", 0)
        triangles = np.stack([np.asarray(f, dtype=np.int64) for f in faces])
    return TriangleMesh(vertices, triangles, normals)


# Reports


def format_report(values: Mapping[str, object]) -> str:
    """``key=value`` lines; floats use repr so they round-trip."""
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}\n")
    return "".join(lines)


def write_report(path: str | Path, values: Mapping[str, object]) -> None:
    atomic_write_text(path, format_report(values))


def read_report(path: str | Path) -> dict[str, float]:
    raw = _read(path)
    values: dict[str, float] = {}
    offset = 0
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text and not text.startswith(b"#"):
            key, sep, value = text.partition(b"=")
            if not sep or not key:
                raise DataFormatError(path, "expected key=value", offset)
            values[key.decode()] = _float(path, offset + len(key) + 1, value)
        offset += len(line)
    return values


def format_table(values: Mapping[str, float], title: str = "") -> str:
    """Aligned two-column text for humans."""
    width = max((len(k) for k in values), default=0)
    lines = [title, "=" * len(title)] if title else []
    lines += [f"{key:<{width}}  {value:.6g}" for key, value in values.items()]
    return "\n".join(lines) + "\n"


def write_latency(directory: str | Path, stats: LatencyStats) -> None:
    """``latency.txt`` (one ``frame_id ms`` line per frame) and its summary."""
    directory = Path(directory)
    atomic_write_text(directory / "latency.txt", stats.as_lines())
    write_report(directory / "latency_summary.txt", stats.summary())


def write_text(path: str | Path, text: str) -> None:
    atomic_write_text(path, text)


__all__ = [
    "format_pose",
    "format_report",
    "format_table",
    "read_depth_pgm",
    "read_image_pgm",
    "read_intrinsics",
    "read_ply",
    "read_pose",
    "read_report",
    "write_depth_pgm",
    "write_image_pgm",
    "write_intrinsics",
    "write_latency",
    "write_ply",
    "write_pose",
    "write_report",
    "write_text",
]
