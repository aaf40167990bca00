"""Per-frame similarity to the reference, anchor-frame selection and clips.

Every frame gets a general error: the mean error score of its feature
matches against the reference. Frames whose score dips to a local minimum
below a threshold become anchors, and each frame is owned by its nearest
anchor, which gives a partition of the sequence into clips.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureMatchSet
from .flow.error import ErrorWeights, correspondence_scores

MIN_MATCHES = 8


@dataclass(frozen=True)
class FrameScore:
    frame: int
    general_error: float
    match_count: int

    @property
    def usable(self) -> bool:
        return math.isfinite(self.general_error)


def _interior(img, xy: np.ndarray) -> np.ndarray:
    h, w = (img.pixels if hasattr(img, "pixels") else np.asarray(img)).shape
    return (xy[:, 0] >= 1) & (xy[:, 0] <= w - 2) & (xy[:, 1] >= 1) & (xy[:, 1] <= h - 2)


def frame_general_error(ref, target, matches: FeatureMatchSet, weights: ErrorWeights = ErrorWeights(),
                        min_matches: int = MIN_MATCHES) -> FrameScore:
    """Mean error score over the match pairs, or ``inf`` with fewer than ``min_matches``.

    Pairs whose reference position has no full 3x3 neighbourhood are left out
    of the mean; ``match_count`` is the number of pairs actually scored.
    """
    keep = _interior(ref, matches.ref_xy) if len(matches) else np.zeros(0, dtype=bool)
    n = int(keep.sum())
    if n < min_matches or n == 0:
        return FrameScore(matches.target_frame, math.inf, n)
    scores = correspondence_scores(ref, target, matches.ref_xy[keep], matches.target_xy[keep], weights)
    return FrameScore(matches.target_frame, float(np.mean(scores)), n)


@dataclass(frozen=True)
class AnchorPolicy:
    """How sub-threshold score minima are turned into anchors.

    With ``threshold`` unset the threshold is ``max(absolute_cap, percentile
    of the finite non-reference scores)``.
    """

    threshold: float | None = None
    absolute_cap: float = 0.02
    percentile: float = 20.0
    min_spacing: int = 10

    def __post_init__(self):
        if self.threshold is not None and self.threshold < 0:
            raise ValueError("anchor threshold must be non-negative")
        if self.absolute_cap < 0:
            raise ValueError("anchor absolute cap must be non-negative")
        if not 0.0 <= self.percentile <= 100.0:
            raise ValueError("percentile must lie in [0, 100]")
        if self.min_spacing < 1:
            raise ValueError("min_spacing must be >= 1")

    def resolve_threshold(self, scores: np.ndarray, reference: int) -> float:
        if self.threshold is not None:
            return float(self.threshold)
        others = np.delete(scores, reference)
        finite = others[np.isfinite(others)]
        if len(finite) == 0:
            return float(self.absolute_cap)
        return float(max(self.absolute_cap, np.percentile(finite, self.percentile)))


@dataclass(frozen=True)
class Clip:
    anchor: int
    start: int
    stop: int  # exclusive

    def __contains__(self, frame: int) -> bool:
        return self.start <= frame < self.stop

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def frames(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True)
class ClipPartition:
    anchor_indices: tuple[int, ...]
    clips: tuple[Clip, ...]
    threshold: float = math.nan

    @property
    def frame_count(self) -> int:
        return self.clips[-1].stop if self.clips else 0

    def clip_of(self, frame: int) -> Clip:
        for c in self.clips:
            if frame in c:
                return c
        raise IndexError(f"frame {frame} is outside the partition")

    def is_anchor(self, frame: int) -> bool:
        return frame in self.anchor_indices


def partition_by_nearest(anchors, frame_count: int, threshold: float = math.nan) -> ClipPartition:
    """Give each frame to its nearest anchor, ties to the earlier one."""
    anchors = sorted(set(int(a) for a in anchors))
    if not anchors:
        raise ValueError("at least one anchor is required")
    if anchors[0] < 0 or anchors[-1] >= frame_count:
        raise ValueError("anchor index out of range")
    bounds = [0] + [(a + b) // 2 + 1 for a, b in zip(anchors, anchors[1:])] + [frame_count]
    clips = tuple(Clip(a, bounds[k], bounds[k + 1]) for k, a in enumerate(anchors))
    return ClipPartition(tuple(anchors), clips, threshold)


def _local_minima(s: np.ndarray) -> np.ndarray:
    left = np.concatenate([[np.inf], s[:-1]])
    right = np.concatenate([s[1:], [np.inf]])
    return (s <= left) & (s <= right)


def select_anchor_frames(scores: list[FrameScore], policy: AnchorPolicy = AnchorPolicy(),
                         reference: int = 0) -> ClipPartition:
    """Anchors are score minima under the threshold, at least ``min_spacing`` apart.

    Candidates are taken greedily from the lowest score up (ties by frame
    index) and the reference is always taken first, so lowering the
    threshold can only remove anchors.
    """
    frames = sorted(s.frame for s in scores)
    if frames != list(range(len(frames))):
        raise ValueError("scores must cover frames 0..n-1 exactly once")
    n = len(frames)
    if not 0 <= reference < n:
        raise ValueError("reference frame missing from scores")
    s = np.full(n, np.inf)
    for fs in scores:
        s[fs.frame] = fs.general_error
    threshold = policy.resolve_threshold(s, reference)
    cand = np.flatnonzero(_local_minima(s) & np.isfinite(s) & (s < threshold))
    cand = cand[cand != reference]
    order = sorted(cand.tolist(), key=lambda i: (s[i], i))
    chosen = [reference]
    for i in order:
        if all(abs(i - a) >= policy.min_spacing for a in chosen):
            chosen.append(i)
    return partition_by_nearest(chosen, n, threshold)


def single_clip(frame_count: int, reference: int = 0) -> ClipPartition:
    return ClipPartition((reference,), (Clip(reference, 0, frame_count),))


def write_partition_report(path: str | Path, partition: ClipPartition) -> None:
    lines = [f"anchor={c.anchor} range=[{c.start},{c.stop})" for c in partition.clips]
    Path(path).write_text("\n".join(lines) + "\n")


_REPORT_LINE = re.compile(r"anchor=(\d+) range=\[(\d+),(\d+)\)")


def read_partition_report(path: str | Path) -> ClipPartition:
    clips = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        m = _REPORT_LINE.fullmatch(line.strip())
        if m is None:
            raise ValueError(f"{path}: malformed partition line {line!r}")
        clips.append(Clip(*map(int, m.groups())))
    return ClipPartition(tuple(c.anchor for c in clips), tuple(clips))


def write_scores_csv(path: str | Path, scores: list[FrameScore]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "general_error", "match_count"])
        for s in sorted(scores, key=lambda s: s.frame):
            wr.writerow([s.frame, repr(s.general_error), s.match_count])


def read_scores_csv(path: str | Path) -> list[FrameScore]:
    with open(path, newline="") as fh:
        return [FrameScore(int(r["frame"]), float(r["general_error"]), int(r["match_count"]))
                for r in csv.DictReader(fh)]
