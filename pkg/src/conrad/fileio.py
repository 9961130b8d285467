"""File formats: 8-bit PNG images, raw float32 depth maps, feature matrices.

Raw formats share a 16-byte little-endian header (magic, two u32 dims, u32
reserved) followed by row-major float32 payload:

    depth maps  "CRDD"  width, height
    features    "CRDF"  n_rows, dim
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import CameraPose

DEPTH_MAGIC = b"CRDD"
FEATURE_MAGIC = b"CRDF"
_HEADER = struct.Struct("<4sIII")


class FileFormatError(ValueError):
    pass


def write_png(path, image) -> None:
    """Save a float image in [0, 1] (HxW or HxWx3) as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    arr = np.clip(arr, 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(Path(path))


def read_png(path) -> np.ndarray:
    """Load a PNG as float32 in [0, 1]; RGB images come back HxWx3."""
    img = Image.open(Path(path))
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def _write_raw(path, magic: bytes, dim0: int, dim1: int, payload: np.ndarray) -> None:
    with open(Path(path), "wb") as f:
        f.write(_HEADER.pack(magic, dim0, dim1, 0))
        f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _read_raw(path, magic: bytes):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FileFormatError(f"{path}: truncated header")
    got_magic, dim0, dim1, _ = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FileFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    expected = _HEADER.size + 4 * dim0 * dim1
    if len(raw) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return dim0, dim1, data


def write_depth_raw(path, depth) -> None:
    arr = np.asarray(depth, dtype=np.float32)
    if arr.ndim != 2:
        raise FileFormatError("depth map must be HxW")
    h, w = arr.shape
    _write_raw(path, DEPTH_MAGIC, w, h, arr)


def read_depth_raw(path) -> np.ndarray:
    w, h, data = _read_raw(path, DEPTH_MAGIC)
    return data.reshape(h, w).copy()


def write_features(path, features) -> None:
    arr = np.asarray(features, dtype=np.float32)
    if arr.ndim != 2:
        raise FileFormatError("feature matrix must be NxD")
    n, d = arr.shape
    _write_raw(path, FEATURE_MAGIC, n, d, arr)


def read_features(path) -> np.ndarray:
    n, d, data = _read_raw(path, FEATURE_MAGIC)
    return data.reshape(n, d).copy()


def read_pose_file(path) -> list[CameraPose]:
    """Line-delimited poses: `azimuth_deg elevation_deg radius`; # starts a comment."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FileFormatError(f"{path}:{lineno}: expected 'azimuth elevation radius'")
        az, el, r = (float(p) for p in parts)
        poses.append(CameraPose(azimuth=math.radians(az), elevation=math.radians(el), radius=r))
    return poses


def write_pose_file(path, poses: list[CameraPose]) -> None:
    lines = [
        f"{math.degrees(p.azimuth):.6f} {math.degrees(p.elevation):.6f} {p.radius:.6f}"
        for p in poses
    ]
    Path(path).write_text("\n".join(lines) + "\n")
