"""Endpoint-error metrics against ground-truth annotation points."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FIRST_K = 30


def endpoint_error(tracked, gt) -> float:
    """Euclidean distance between a tracked and a ground-truth position."""
    return float(math.hypot(tracked[0] - gt[0], tracked[1] - gt[1]))


@dataclass
class EvaluationReport:
    frames: list[int]
    mean_ee: list[float]
    method: str = ""
    sequence: str = ""
    first_k: int = FIRST_K
    point_counts: list[int] = field(default_factory=list)

    @property
    def aee(self) -> float:
        return float(np.mean(self.mean_ee)) if self.mean_ee else math.nan

    @property
    def aee_first(self) -> float:
        vals = [e for f, e in zip(self.frames, self.mean_ee) if f < self.first_k]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def final_ee(self) -> float:
        return self.mean_ee[-1] if self.mean_ee else math.nan


def _as_point_dict(frame) -> dict[int, tuple[float, float]]:
    if isinstance(frame, dict):
        return frame
    arr = np.asarray(frame, dtype=np.float64).reshape(-1, 2)
    return {i: (float(x), float(y)) for i, (x, y) in enumerate(arr)}


def evaluate_run(tracked, gt, method: str = "", sequence: str = "", first_k: int = FIRST_K) -> EvaluationReport:
    """Per-frame mean EE over the points with ground truth, plus the sequence averages.

    ``tracked`` and ``gt`` are per-frame point collections: ``(P, 2)`` arrays
    indexed by point id, or ``{point_id: (x, y)}`` dicts. A tracked
    :class:`~apotrack.propagation.TrackedSequence` is accepted as well. Frames
    lacking some ground-truth points are averaged over the points they have;
    a tracked frame lacking a ground-truth point, or a frame-count mismatch,
    is an error.
    """
    if hasattr(tracked, "meshes"):
        tracked = [m.vertices for m in tracked.meshes]
    tracked, gt = list(tracked), list(gt)
    if len(tracked) != len(gt):
        raise ValueError(f"frame mismatch: {len(tracked)} tracked frames vs {len(gt)} ground-truth frames")
    frames, means, counts = [], [], []
    for f, (tr, g) in enumerate(zip(tracked, gt)):
        tr, g = _as_point_dict(tr), _as_point_dict(g)
        missing = set(g) - set(tr)
        if missing:
            raise ValueError(f"frame {f}: ground-truth point ids {sorted(missing)[:5]} not tracked")
        if not g:
            continue
        ids = sorted(g)
        a = np.array([tr[i] for i in ids])
        b = np.array([g[i] for i in ids])
        frames.append(f)
        means.append(float(np.mean(np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1]))))
        counts.append(len(ids))
    return EvaluationReport(frames, means, method, sequence, first_k, counts)


def write_frame_report(path: str | Path, report: EvaluationReport) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "mean_ee"])
        for f, e in zip(report.frames, report.mean_ee):
            wr.writerow([f, f"{e:.6f}"])


def write_summary(path: str | Path, reports: list[EvaluationReport]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["method", "sequence", "AEE", "AEE_first30"])
        for r in reports:
            wr.writerow([r.method, r.sequence, f"{r.aee:.6f}", f"{r.aee_first:.6f}"])


def read_summary(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"method": r["method"], "sequence": r["sequence"], "AEE": float(r["AEE"]),
                 "AEE_first30": float(r["AEE_first30"])} for r in csv.DictReader(fh)]
