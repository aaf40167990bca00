from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .detector import FeatureSet


@dataclass(frozen=True)
class RawMatch:
    ref_index: int
    target_index: int
    distance: float


@dataclass
class FeatureMatchSet:
    """Reference-to-target correspondences for one frame.

    Arrays are aligned: pair ``k`` maps ``ref_xy[k]`` (reference feature
    ``ref_index[k]``) to ``target_xy[k]``.
    """

    target_frame: int
    ref_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    target_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    ref_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    target_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    distance: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.ref_index)

    @property
    def pairs(self) -> list[tuple[tuple[float, float], tuple[float, float], float]]:
        return [(tuple(r), tuple(t), float(d)) for r, t, d in zip(self.ref_xy, self.target_xy, self.distance)]

    def select(self, mask) -> "FeatureMatchSet":
        mask = np.asarray(mask)
        return FeatureMatchSet(self.target_frame, self.ref_index[mask], self.target_index[mask],
                               self.ref_xy[mask], self.target_xy[mask], self.distance[mask])

    @classmethod
    def from_raw(cls, target_frame: int, matches: list[RawMatch], reference: FeatureSet,
                 target: FeatureSet) -> "FeatureMatchSet":
        ri = np.array([m.ref_index for m in matches], dtype=np.intp)
        ti = np.array([m.target_index for m in matches], dtype=np.intp)
        d = np.array([m.distance for m in matches], dtype=np.float64)
        return cls(target_frame, ri, ti, reference.positions[ri].reshape(-1, 2),
                   target.positions[ti].reshape(-1, 2), d)


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def _ratio_best(dist: np.ndarray, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Best column per row and whether it passes the ratio test."""
    best = np.argmin(dist, axis=1)
    d1 = dist[np.arange(len(dist)), best]
    if dist.shape[1] < 2:
        return best, np.ones(len(dist), dtype=bool)
    d2 = np.partition(dist, 1, axis=1)[:, 1]
    return best, d1 < ratio * d2


def match_features(reference: FeatureSet, target: FeatureSet, ratio: float = 0.8) -> list[RawMatch]:
    """Mutual nearest-neighbour descriptor matches passing the ratio test both ways."""
    if len(reference) == 0 or len(target) == 0:
        return []
    dist = _distances(reference.descriptors, target.descriptors)
    fwd, fwd_ok = _ratio_best(dist, ratio)
    bwd, bwd_ok = _ratio_best(dist.T, ratio)
    out = []
    for i, j in enumerate(fwd):
        if fwd_ok[i] and bwd[j] == i and bwd_ok[j]:
            out.append(RawMatch(i, int(j), float(dist[i, j])))
    return out


def reject_outliers(matches: FeatureMatchSet, tau: float = 30.0) -> FeatureMatchSet:
    """Keep exactly the pairs whose position displacement is strictly below ``tau`` pixels."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if len(matches) == 0:
        return matches.select(np.zeros(0, dtype=bool))
    disp = np.linalg.norm(matches.target_xy - matches.ref_xy, axis=1)
    return matches.select(disp < tau)


OutlierRejector = Callable[[FeatureMatchSet], FeatureMatchSet]


def distance_rejector(tau: float = 30.0) -> OutlierRejector:
    return lambda m: reject_outliers(m, tau)


def match_frame(reference: FeatureSet, target: FeatureSet, frame: int, ratio: float = 0.8,
                rejector: OutlierRejector | None = None) -> FeatureMatchSet:
    raw = FeatureMatchSet.from_raw(frame, match_features(reference, target, ratio), reference, target)
    return (rejector or distance_rejector())(raw)
