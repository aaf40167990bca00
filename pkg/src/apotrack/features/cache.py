"""Per-frame binary feature cache.

Little-endian: int32 count, then per feature float32 ``x, y, scale,
orientation`` followed by the 128 float32 descriptor entries.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .detector import DESCRIPTOR_SIZE, FeatureSet

_RECORD = 4 + DESCRIPTOR_SIZE


def write_features(path: str | Path, feats: FeatureSet) -> None:
    rec = np.empty((len(feats), _RECORD), dtype="<f4")
    rec[:, 0:2] = feats.positions
    rec[:, 2] = feats.scales
    rec[:, 3] = feats.orientations
    rec[:, 4:] = feats.descriptors
    with open(path, "wb") as fh:
        fh.write(np.array([len(feats)], dtype="<i4").tobytes())
        fh.write(rec.tobytes())


def read_features(path: str | Path) -> FeatureSet:
    raw = Path(path).read_bytes()
    (count,) = np.frombuffer(raw, dtype="<i4", count=1)
    if len(raw) != 4 + int(count) * _RECORD * 4:
        raise ValueError(f"{path}: truncated feature cache")
    rec = np.frombuffer(raw, dtype="<f4", offset=4).reshape(int(count), _RECORD)
    return FeatureSet(rec[:, 0:2].astype(np.float64), rec[:, 2].astype(np.float64),
                      rec[:, 3].astype(np.float64), rec[:, 4:].copy())
