"""Middlebury ``.flo`` reader/writer.

Layout: float32 magic 202021.25 ("PIEH"), int32 width, int32 height, then
``height * width`` interleaved float32 ``(u, v)`` pairs in row-major order,
all little-endian.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .field import FlowField

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"


def write_flo(path: str | Path, flow: FlowField | np.ndarray) -> None:
    vec = flow.vectors if isinstance(flow, FlowField) else np.asarray(flow)
    h, w = vec.shape[:2]
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def read_flo(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FLO_TAG:
        raise ValueError(f"{path}: bad .flo magic")
    w, h = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
    if w <= 0 or h <= 0:
        raise ValueError(f"{path}: invalid dimensions {w}x{h}")
    expected = 12 + int(w) * int(h) * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(int(h), int(w), 2)
    return FlowField(data.astype(np.float32))
