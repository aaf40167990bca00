"""Anchor patches: vertices re-located on far frames through matched features.

A reference vertex is written as an affine combination of its three nearest
matched reference features, and the same combination of their matched
positions gives the vertex in the target frame. Candidates are kept only
when their photometric error score is below ``eta``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .features import FeatureMatchSet
from .flow.error import ErrorWeights, correspondence_scores
from .mesh import TriangleMesh

MIN_TRIANGLE_AREA = 1e-6


class DegenerateTriangleError(ValueError):
    pass


@dataclass(frozen=True)
class BarycentricTriple:
    b1: float
    b2: float
    b3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.b1, self.b2, self.b3])


@dataclass(frozen=True)
class AnchorPatch:
    vertex_id: int
    frame: int
    position: tuple[float, float]
    score: float


def barycentric_batch(f1, f2, f3, v, min_area: float = MIN_TRIANGLE_AREA):
    """Barycentric coordinates of points ``v`` w.r.t. triangles ``(f1, f2, f3)``.

    All inputs are ``(N, 2)``. Returns ``(betas (N, 3), valid (N,))`` where
    ``valid`` is false for triangles with area below ``min_area``.
    """
    f1, f2, f3, v = (np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in (f1, f2, f3, v))
    e1 = f2 - f1
    e2 = f3 - f1
    p = v - f1
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    valid = 0.5 * np.abs(det) >= min_area
    safe = np.where(valid, det, 1.0)
    b2 = (p[:, 0] * e2[:, 1] - p[:, 1] * e2[:, 0]) / safe
    b3 = (e1[:, 0] * p[:, 1] - e1[:, 1] * p[:, 0]) / safe
    b1 = 1.0 - b2 - b3
    return np.stack([b1, b2, b3], axis=1), valid


def solve_barycentric(f1, f2, f3, v, min_area: float = MIN_TRIANGLE_AREA) -> BarycentricTriple:
    """Solve ``b1 f1 + b2 f2 + b3 f3 = v`` with ``b1 + b2 + b3 = 1``."""
    betas, valid = barycentric_batch(f1, f2, f3, v, min_area)
    if not valid[0]:
        raise DegenerateTriangleError("feature triple is collinear")
    return BarycentricTriple(*map(float, betas[0]))


def map_vertex(triple: BarycentricTriple, g1, g2, g3) -> tuple[float, float]:
    """Transfer a vertex through target positions: ``b1 g1 + b2 g2 + b3 g3``."""
    g = np.array([g1, g2, g3], dtype=np.float64)
    out = triple.as_array() @ g
    return float(out[0]), float(out[1])


class CorrespondenceIndex:
    """Nearest-neighbour lookup over reference-side positions of a correspondence set.

    Duplicate reference positions keep their first occurrence. The search
    grows from ``start_radius`` by doubling up to ``max_radius``; this is the
    same as taking the three nearest sources when the third lies within
    ``max_radius`` (the last, clamped, search radius).
    """

    def __init__(self, src: np.ndarray, dst: np.ndarray, start_radius: float = 5.0,
                 max_radius: float = 40.0):
        src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
        dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
        if len(src):
            _, first = np.unique(src, axis=0, return_index=True)
            keep = np.sort(first)
            src, dst = src[keep], dst[keep]
        self.src, self.dst = src, dst
        self.start_radius = start_radius
        self.max_radius = max_radius
        self._tree = cKDTree(src) if len(src) >= 3 else None

    def nearest3(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Indices ``(N, 3)`` of the three nearest sources and a found mask."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if self._tree is None or len(points) == 0:
            return np.zeros((len(points), 3), dtype=np.intp), np.zeros(len(points), dtype=bool)
        dist, idx = self._tree.query(points, k=3)
        found = dist[:, 2] <= max(self.max_radius, self.start_radius)
        return np.where(found[:, None], idx, 0), found

    def transfer(self, points: np.ndarray, min_area: float = MIN_TRIANGLE_AREA):
        """Map reference ``points`` into the target; returns ``(mapped, ok)``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        idx, found = self.nearest3(points)
        mapped = np.zeros_like(points)
        if not found.any():
            return mapped, found
        s, d = self.src, self.dst
        betas, valid = barycentric_batch(s[idx[:, 0]], s[idx[:, 1]], s[idx[:, 2]], points, min_area)
        ok = found & valid
        mapped = (betas[:, :1] * d[idx[:, 0]] + betas[:, 1:2] * d[idx[:, 1]] + betas[:, 2:] * d[idx[:, 2]])
        return np.where(ok[:, None], mapped, 0.0), ok


def label_anchor_patches(mesh: TriangleMesh, matches: FeatureMatchSet, ref, target, eta: float = 0.08,
                         weights: ErrorWeights = ErrorWeights(), start_radius: float = 5.0,
                         max_radius: float = 40.0) -> list[AnchorPatch]:
    """Anchor patches of ``mesh`` on frame ``matches.target_frame``.

    Vertices lacking three nearby matched features, or whose feature triple
    is degenerate, or whose mapped position leaves the frame, get no patch.
    """
    if len(matches) < 3 or len(mesh) == 0:
        return []
    index = CorrespondenceIndex(matches.ref_xy, matches.target_xy, start_radius, max_radius)
    mapped, ok = index.transfer(mesh.vertices)
    h, w = (target.pixels if hasattr(target, "pixels") else np.asarray(target)).shape
    ok &= (mapped[:, 0] >= 0) & (mapped[:, 0] <= w - 1) & (mapped[:, 1] >= 0) & (mapped[:, 1] <= h - 1)
    ids = np.flatnonzero(ok)
    if len(ids) == 0:
        return []
    scores = correspondence_scores(ref, target, mesh.vertices[ids], mapped[ids], weights)
    keep = scores < eta
    return [AnchorPatch(int(v), matches.target_frame, (float(mapped[v, 0]), float(mapped[v, 1])), float(e))
            for v, e in zip(ids[keep], scores[keep])]


class PatchTable:
    """Anchor patches grouped by vertex for nearest-in-time lookup."""

    def __init__(self, patches=()):
        self._by_vertex: dict[int, dict[int, AnchorPatch]] = {}
        for p in patches:
            self.add(p)

    def add(self, patch: AnchorPatch) -> None:
        slot = self._by_vertex.setdefault(patch.vertex_id, {})
        if patch.frame in slot:
            raise ValueError(f"vertex {patch.vertex_id} already has a patch on frame {patch.frame}")
        slot[patch.frame] = patch

    def extend(self, patches) -> None:
        for p in patches:
            self.add(p)

    def frames_for(self, vertex_id: int) -> list[int]:
        return sorted(self._by_vertex.get(vertex_id, {}))

    def get(self, vertex_id: int, frame: int) -> AnchorPatch | None:
        return self._by_vertex.get(vertex_id, {}).get(frame)

    def __iter__(self):
        for v in sorted(self._by_vertex):
            for f in sorted(self._by_vertex[v]):
                yield self._by_vertex[v][f]

    def __len__(self) -> int:
        return sum(len(s) for s in self._by_vertex.values())


def write_patch_csv(path: str | Path, patches) -> None:
    rows = sorted(patches, key=lambda p: (p.frame, p.vertex_id))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "vertex_id", "x", "y", "score"])
        for p in rows:
            wr.writerow([p.frame, p.vertex_id, repr(p.position[0]), repr(p.position[1]), repr(p.score)])


def read_patch_csv(path: str | Path) -> list[AnchorPatch]:
    with open(path, newline="") as fh:
        return [AnchorPatch(int(r["vertex_id"]), int(r["frame"]), (float(r["x"]), float(r["y"])),
                            float(r["score"])) for r in csv.DictReader(fh)]
