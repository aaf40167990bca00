from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..imaging import sample_bilinear


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense displacement grid; ``vectors[y, x] = (u, v)`` in pixels."""

    vectors: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.vectors)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"flow vectors must have shape (H, W, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("flow vectors must be finite")
        if arr.flags.writeable or arr.base is not None:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    @property
    def u(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.vectors[..., 1]

    def at(self, x, y) -> np.ndarray:
        """Bilinearly sampled displacement(s) at continuous positions, clamped at borders."""
        return sample_bilinear(self.vectors, x, y)


def check_same_shape(*items) -> None:
    shapes = {tuple(it.shape) for it in items}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")
