"""Wire payload codecs: little-endian float32 arrays, base64 inside JSON."""

from __future__ import annotations

import base64

import numpy as np


class WireError(ValueError):
    pass


def encode_f32(arr) -> str:
    return base64.b64encode(
        np.ascontiguousarray(np.asarray(arr), dtype="<f4").tobytes()
    ).decode("ascii")


def decode_f32(data: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(data.encode("ascii"), validate=True)
    except Exception as err:
        raise WireError(f"invalid base64 payload: {err}") from err
    count = int(np.prod(shape)) if len(shape) else 1
    if len(raw) != 4 * count:
        raise WireError(f"payload carries {len(raw)} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
