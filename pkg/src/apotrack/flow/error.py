"""Weighted 3x3 RMS photometric residual used to score correspondences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..imaging import Image, sample_bilinear

CARDINAL = ((-1, 0), (1, 0), (0, -1), (0, 1))
DIAGONAL = ((-1, -1), (1, 1), (-1, 1), (1, -1))
_TAPS = np.array(((0, 0),) + CARDINAL + DIAGONAL, dtype=np.float64)


@dataclass(frozen=True)
class ErrorWeights:
    """Weights of the centre, cardinal and diagonal squared differences."""

    center: float = 1.0
    cardinal: float = 0.25
    diagonal: float = 0.125

    def __post_init__(self):
        vals = (self.center, self.cardinal, self.diagonal)
        if min(vals) < 0 or sum(vals) <= 0:
            raise ValueError("error weights must be non-negative with a positive sum")

    @property
    def total(self) -> float:
        return self.center + self.cardinal + self.diagonal


def _pixels(img):
    return img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def error_scores(a, b, x, y, u, v, weights: ErrorWeights = ErrorWeights()) -> np.ndarray:
    """Vectorized error score for correspondences ``(x, y) -> (x + u, y + v)``.

    ``a`` is sampled on the 3x3 neighbourhood of ``(x, y)``; ``b`` on the same
    neighbourhood shifted by ``(u, v)``, bilinearly and clamped at borders.
    """
    pa, pb = _pixels(a), _pixels(b)
    x, y, u, v = np.broadcast_arrays(*(np.asarray(t, dtype=np.float64) for t in (x, y, u, v)))
    h, w = pa.shape
    if np.any((x < 1) | (x > w - 2) | (y < 1) | (y > h - 2)):
        raise ValueError("3x3 neighbourhood of a query point lies outside the source image")

    # all nine taps in one sampling pass per image: centre, cardinal, diagonal
    ox, oy = _TAPS[:, 0], _TAPS[:, 1]
    xa, ya = x[..., None] + ox, y[..., None] + oy
    diff = sample_bilinear(pa, xa, ya) - sample_bilinear(pb, xa + u[..., None], ya + v[..., None])
    sq = diff * diff
    centre = sq[..., 0]
    card = sq[..., 1:5].sum(axis=-1)
    diag = sq[..., 5:9].sum(axis=-1)
    num = weights.center * centre + weights.cardinal * card + weights.diagonal * diag
    return np.sqrt(num / weights.total)


def error_score(a, b, pos, disp, weights: ErrorWeights = ErrorWeights()) -> float:
    """Error of matching pixel ``pos`` in ``a`` to ``pos + disp`` in ``b``."""
    return float(error_scores(a, b, pos[0], pos[1], disp[0], disp[1], weights))


def correspondence_scores(a, b, src: np.ndarray, dst: np.ndarray,
                          weights: ErrorWeights = ErrorWeights()) -> np.ndarray:
    """Scores for position pairs given as ``(N, 2)`` arrays of ``(x, y)``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) == 0:
        return np.zeros(0)
    return error_scores(a, b, src[:, 0], src[:, 1], dst[:, 0] - src[:, 0], dst[:, 1] - src[:, 1], weights)
