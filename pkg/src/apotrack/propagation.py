"""Mesh propagation from the reference through anchors and clips.

The reference mesh is carried to every anchor frame by the long flow chain,
and vertices that land on mismatching texture are re-placed by barycentric
transfer over trusted correspondences. Inside each clip the anchor mesh is
advected to every frame; where a vertex also has an anchor patch on a
nearby frame, the two candidate positions are blended with weights given by
the other candidate's error score.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .anchors import (ClipPartition, FrameScore, frame_general_error, select_anchor_frames, single_clip,
                      write_partition_report, write_scores_csv)
from .config import PipelineConfig
from .features import FeatureMatchSet, FeatureSet, detect_features, distance_rejector, match_frame
from .flow import ErrorWeights, FlowChainCache, FlowField, correspondence_scores, estimate_sequence_flows
from .imaging import Image, SequenceHandle
from .mesh import TriangleMesh, read_mesh, write_mesh
from .parallel import ordered_map
from .patches import AnchorPatch, CorrespondenceIndex, PatchTable, label_anchor_patches, write_patch_csv

FLOW = "flow"
PATCH = "patch"
BLENDED = "blended"
REPAIRED = "barycentric-repair"
ELIMINATED = "flow-eliminated"
PROVENANCE_TAGS = (FLOW, PATCH, BLENDED, REPAIRED, ELIMINATED)


def advect_points(points: np.ndarray, w: FlowField) -> np.ndarray:
    """``p + w(p)`` for ``(N, 2)`` points, the field sampled bilinearly and clamped."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return points + w.at(points[:, 0], points[:, 1])


def advect_vertex(v, w: FlowField) -> tuple[float, float]:
    out = advect_points(np.array([v], dtype=np.float64), w)[0]
    return float(out[0]), float(out[1])


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def candidate_errors(ref, target, ref_points: np.ndarray, candidates: np.ndarray,
                     weights: ErrorWeights = ErrorWeights()) -> np.ndarray:
    """Error of each reference point against its candidate; ``inf`` where undefined.

    A reference point needs a full 3x3 neighbourhood inside the frame for its
    error to be defined.
    """
    ref_points = np.asarray(ref_points, dtype=np.float64).reshape(-1, 2)
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    h, w = _pixels(ref).shape
    x, y = ref_points[:, 0], ref_points[:, 1]
    ok = (x >= 1) & (x <= w - 2) & (y >= 1) & (y <= h - 2)
    out = np.full(len(ref_points), np.inf)
    if ok.any():
        out[ok] = correspondence_scores(ref, target, ref_points[ok], candidates[ok], weights)
    return out


def resolve_conflicts(v_flow: np.ndarray, v_patch: np.ndarray, e_flow: np.ndarray,
                      e_patch: np.ndarray) -> np.ndarray:
    """Cross-weighted blend: each candidate is weighted by the other's error.

    Both errors zero gives the midpoint; an undefined error hands the vertex
    to the other candidate, and when both are undefined the flow candidate
    wins. The formula is symmetric in the two candidates, and the result is
    clipped to their bounding box so rounding never leaves the segment.
    """
    vf = np.asarray(v_flow, dtype=np.float64).reshape(-1, 2)
    vp = np.asarray(v_patch, dtype=np.float64).reshape(-1, 2)
    ef = np.asarray(e_flow, dtype=np.float64).reshape(-1, 1)
    ep = np.asarray(e_patch, dtype=np.float64).reshape(-1, 1)
    if np.any(ef < 0) or np.any(ep < 0):
        raise ValueError("error scores must be non-negative")
    ff, fp = np.isfinite(ef), np.isfinite(ep)
    both = ff & fp
    ef_b, ep_b = np.where(both, ef, 0.0), np.where(both, ep, 0.0)
    denom = ep_b + ef_b
    safe = np.where(denom > 0, denom, 1.0)
    blend = np.where(denom > 0, (ep_b * vf + ef_b * vp) / safe, 0.5 * (vf + vp))
    blend = np.clip(blend, np.minimum(vf, vp), np.maximum(vf, vp))
    # a zero-error candidate against a non-zero one wins exactly, not up to rounding
    blend = np.where((ep_b == 0) & (ef_b > 0), vp, np.where((ef_b == 0) & (ep_b > 0), vf, blend))
    out = np.where(both, blend, np.where(fp, vp, vf))
    return out


def resolve_conflict(v_flow, v_patch, e_flow: float, e_patch: float) -> tuple[float, float]:
    out = resolve_conflicts(np.array([v_flow]), np.array([v_patch]), np.array([e_flow]), np.array([e_patch]))[0]
    return float(out[0]), float(out[1])


def resolve_candidates(positions, errors) -> tuple[float, float]:
    """Blend any number of candidates with weights proportional to ``1 / E_k``.

    Weights are computed as products of the other candidates' errors, which
    keeps zero errors well defined; for two candidates this is exactly
    :func:`resolve_conflict` with the first candidate taken as the flow one.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    err = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(pos) == 0 or len(pos) != len(err):
        raise ValueError("need one error per candidate")
    if len(pos) == 1:
        return float(pos[0, 0]), float(pos[0, 1])
    if len(pos) == 2:
        return resolve_conflict(pos[0], pos[1], err[0], err[1])
    finite = np.isfinite(err)
    if not finite.any():
        return float(pos[0, 0]), float(pos[0, 1])
    pos, err = pos[finite], err[finite]
    w = np.array([np.prod(np.delete(err, k)) for k in range(len(err))])
    if w.sum() == 0:
        w = (err == 0).astype(np.float64)
    out = (w[:, None] * pos).sum(0) / w.sum()
    return float(out[0]), float(out[1])


def find_nearest_anchor_patch(vertex_id: int, target: int, patches: PatchTable, clip) -> AnchorPatch | None:
    """Patch of ``vertex_id`` on the clip frame closest in time to ``target``.

    A patch on ``target`` itself always wins; equal distances go to the
    earlier frame.
    """
    if target not in clip:
        raise ValueError(f"frame {target} is outside the clip")
    frames = [f for f in patches.frames_for(vertex_id) if f in clip]
    if not frames:
        return None
    best = min(frames, key=lambda f: (abs(f - target), f))
    return patches.get(vertex_id, best)


def propagate_to_anchor(mesh: TriangleMesh, cache: FlowChainCache, anchor: int, frames,
                        matches: FeatureMatchSet | None, eta: float = 0.08,
                        weights: ErrorWeights = ErrorWeights(), anchors=None, reference: int = 0,
                        search: tuple[float, float] = (5.0, 40.0)):
    """Reference mesh carried to an anchor frame, with high-error vertices repaired.

    Returns ``(mesh, provenance, errors)``. Vertices whose flow position
    scores above ``eta`` are re-placed by barycentric transfer over the
    feature matches and the surviving vertices; a repair is kept only if it
    scores at most ``eta`` and lower than the flow position, otherwise the
    vertex keeps its flow position tagged ``flow-eliminated``.
    """
    if anchors is not None and anchor not in anchors:
        raise ValueError(f"frame {anchor} is not an anchor frame")
    ref, target = frames[reference], frames[anchor]
    verts = mesh.vertices
    if anchor == reference:
        return mesh, np.full(len(verts), FLOW, dtype=object), np.zeros(len(verts))
    pos = advect_points(verts, cache.chain(reference, anchor))
    err = candidate_errors(ref, target, verts, pos, weights)
    bad = ~(err <= eta)
    tags = np.full(len(verts), FLOW, dtype=object)
    if bad.any():
        tags[bad] = ELIMINATED
        src = [verts[~bad]]
        dst = [pos[~bad]]
        if matches is not None and len(matches):
            src.insert(0, matches.ref_xy)
            dst.insert(0, matches.target_xy)
        index = CorrespondenceIndex(np.concatenate(src), np.concatenate(dst), *search)
        ids = np.flatnonzero(bad)
        mapped, ok = index.transfer(verts[ids])
        h, w = _pixels(target).shape
        ok &= (mapped[:, 0] >= 0) & (mapped[:, 0] <= w - 1) & (mapped[:, 1] >= 0) & (mapped[:, 1] <= h - 1)
        if ok.any():
            e_rep = np.full(len(ids), np.inf)
            e_rep[ok] = candidate_errors(ref, target, verts[ids[ok]], mapped[ok], weights)
            better = ok & (e_rep < err[ids]) & (e_rep <= eta)
            pos[ids[better]] = mapped[better]
            err[ids[better]] = e_rep[better]
            tags[ids[better]] = REPAIRED
    return mesh.with_vertices(pos), tags, err


def _clip_order(clip) -> list[int]:
    fwd = list(range(clip.anchor + 1, clip.stop))
    bwd = list(range(clip.anchor - 1, clip.start - 1, -1))
    return fwd + bwd


def propagate_clip(anchor_mesh: TriangleMesh, clip, cache: FlowChainCache, patches: PatchTable | None,
                   frames, weights: ErrorWeights = ErrorWeights(), ref_mesh: TriangleMesh | None = None,
                   reference: int = 0) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Vertex positions and provenance for every non-anchor frame of ``clip``.

    ``ref_mesh`` supplies the reference positions at which candidate errors
    are measured; it is only needed when patches are given.
    """
    out = {}
    ref = frames[reference]
    for i in _clip_order(clip):
        cand_a = advect_points(anchor_mesh.vertices, cache.chain(clip.anchor, i))
        tags = np.full(len(cand_a), FLOW, dtype=object)
        if patches is None or len(patches) == 0:
            out[i] = (cand_a, tags)
            continue
        # group vertices by the frame of their nearest patch
        groups: dict[int, list[tuple[int, AnchorPatch]]] = {}
        for v in range(len(cand_a)):
            p = find_nearest_anchor_patch(v, i, patches, clip)
            if p is not None:
                groups.setdefault(p.frame, []).append((v, p))
        if not groups:
            out[i] = (cand_a, tags)
            continue
        ids, cand_b = [], []
        for f in sorted(groups):
            vs = [v for v, _ in groups[f]]
            pts = np.array([p.position for _, p in groups[f]], dtype=np.float64)
            if f != i:
                pts = advect_points(pts, cache.chain(f, i))
            ids.extend(vs)
            cand_b.append(pts)
        ids = np.array(ids, dtype=np.intp)
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        cand_b = np.concatenate(cand_b)[order]
        rv = ref_mesh.vertices[ids]
        e_a = candidate_errors(ref, frames[i], rv, cand_a[ids], weights)
        e_b = candidate_errors(ref, frames[i], rv, cand_b, weights)
        final = cand_a.copy()
        final[ids] = resolve_conflicts(cand_a[ids], cand_b, e_a, e_b)
        same_a = np.all(final[ids] == cand_a[ids], axis=1)
        same_b = np.all(final[ids] == cand_b, axis=1)
        tags[ids] = np.where(same_a, FLOW, np.where(same_b, PATCH, BLENDED))
        out[i] = (final, tags)
    return out


@dataclass
class TrackedSequence:
    meshes: list[TriangleMesh]
    provenance: list[np.ndarray]
    scores: list[FrameScore] = field(default_factory=list)
    partition: ClipPartition | None = None
    patches: PatchTable | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.meshes) != len(self.provenance):
            raise ValueError("one provenance vector per mesh is required")
        ref = self.meshes[0]
        if any(not m.same_topology(ref) for m in self.meshes):
            raise ValueError("all tracked meshes must share the reference topology")

    def __len__(self) -> int:
        return len(self.meshes)

    def positions(self) -> np.ndarray:
        """Vertex positions as a ``(frames, V, 2)`` array."""
        return np.stack([m.vertices for m in self.meshes])

    def provenance_counts(self) -> dict[str, int]:
        tags = np.concatenate(self.provenance) if self.provenance else np.zeros(0, dtype=object)
        return {t: int(np.sum(tags == t)) for t in PROVENANCE_TAGS}


def _frame_list(seq) -> list[Image]:
    return seq.frames() if isinstance(seq, SequenceHandle) else list(seq)


def _detect(params, img):
    return detect_features(img, params)


def detect_sequence_features(frames, config: PipelineConfig) -> list[FeatureSet]:
    return ordered_map(partial(_detect, config.detector_params()), frames, config.workers)


def subsample_mask(count: int, fraction: float, seed: int) -> np.ndarray:
    """Deterministic mask retaining ``round(fraction * count)`` of ``count`` items."""
    keep = int(round(fraction * count))
    mask = np.zeros(count, dtype=bool)
    mask[np.random.default_rng(seed).permutation(count)[:keep]] = True
    return mask


def baseline_track(mesh: TriangleMesh, cache: FlowChainCache, frame_count: int, reference: int = 0) -> list[np.ndarray]:
    """Vertex positions from the reference flow chain alone."""
    out = []
    for i in range(frame_count):
        out.append(mesh.vertices if i == reference else advect_points(mesh.vertices, cache.chain(reference, i)))
    return out


def track_sequence(seq, mesh: TriangleMesh, config: PipelineConfig = PipelineConfig(),
                   cache: FlowChainCache | None = None, features: list[FeatureSet] | None = None,
                   reference: int = 0) -> TrackedSequence:
    """Track ``mesh`` from the reference frame through every frame of ``seq``.

    Precomputed flows and features may be passed in; the result depends only
    on the inputs and ``config``, never on ``config.workers``.
    """
    frames = _frame_list(seq)
    n = len(frames)
    if n < 2:
        raise ValueError("a sequence needs at least two frames")
    h, w = frames[reference].shape
    v = mesh.vertices
    if np.any((v[:, 0] < 0) | (v[:, 0] > w - 1) | (v[:, 1] < 0) | (v[:, 1] > h - 1)):
        raise ValueError("mesh vertices must lie inside the reference frame")
    timings = {}
    t0 = time.perf_counter()
    if cache is None:
        cache = estimate_sequence_flows(frames, config.solver_params(), config.workers, config.chain_memo)
    timings["flow"] = time.perf_counter() - t0
    tags0 = np.full(len(v), FLOW, dtype=object)

    if config.mode == "baseline":
        t0 = time.perf_counter()
        pos = baseline_track(mesh, cache, n, reference)
        meshes = [mesh if i == reference else mesh.with_vertices(p) for i, p in enumerate(pos)]
        timings["propagation"] = time.perf_counter() - t0
        return TrackedSequence(meshes, [tags0.copy() for _ in range(n)], timings=timings)

    weights = config.weights()
    t0 = time.perf_counter()
    need_features = config.anchors_enabled or config.patches_enabled
    if need_features and features is None:
        features = detect_sequence_features(frames, config)
    timings["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    matches: dict[int, FeatureMatchSet] = {}
    if need_features:
        rejector = distance_rejector(config.tau)
        for i in range(n):
            if i != reference:
                matches[i] = match_frame(features[reference], features[i], i, config.ratio, rejector)
    timings["matching"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    scores = []
    if config.anchors_enabled:
        for i in range(n):
            if i == reference:
                scores.append(FrameScore(i, 0.0, len(features[reference])))
            else:
                scores.append(frame_general_error(frames[reference], frames[i], matches[i], weights,
                                                  config.min_matches))
        partition = select_anchor_frames(scores, config.anchor_policy(), reference)
    else:
        partition = single_clip(n, reference)
    timings["anchors"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    anchor_meshes, anchor_tags = {reference: mesh}, {reference: tags0}
    for a in partition.anchor_indices:
        if a != reference:
            m, tg, _ = propagate_to_anchor(mesh, cache, a, frames, matches.get(a), config.eta, weights,
                                           partition.anchor_indices, reference,
                                           (config.search_start, config.search_max))
            anchor_meshes[a], anchor_tags[a] = m, tg
    timings["anchor_propagation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    table = None
    if config.patches_enabled:
        table = PatchTable()
        keep = subsample_mask(len(features[reference]), config.feature_fraction, config.seed)
        for i in range(n):
            if i == reference or partition.is_anchor(i):
                continue
            m = matches[i]
            m = m.select(keep[m.ref_index]) if len(m) else m
            table.extend(label_anchor_patches(mesh, m, frames[reference], frames[i], config.eta, weights,
                                              config.search_start, config.search_max))
    timings["patches"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    run = partial(_propagate_one, anchor_meshes=anchor_meshes, cache=cache, table=table, frames=frames,
                  weights=weights, mesh=mesh, reference=reference)
    parts = ordered_map(run, partition.clips, config.workers, threads=True)
    positions: list[np.ndarray | None] = [None] * n
    provenance: list[np.ndarray | None] = [None] * n
    for a, tg in anchor_tags.items():
        positions[a] = anchor_meshes[a].vertices
        provenance[a] = tg
    for part in parts:
        for i, (p, tg) in part.items():
            positions[i], provenance[i] = p, tg
    meshes = [mesh if i == reference else mesh.with_vertices(positions[i]) for i in range(n)]
    timings["propagation"] = time.perf_counter() - t0
    return TrackedSequence(meshes, provenance, scores, partition, table, timings)


def _propagate_one(clip, anchor_meshes, cache, table, frames, weights, mesh, reference):
    return propagate_clip(anchor_meshes[clip.anchor], clip, cache, table, frames, weights, mesh, reference)


MESH_NAME = "mesh_{:04d}.txt"
PROVENANCE_NAME = "provenance_{:04d}.csv"


def write_tracked(directory: str | Path, tracked: TrackedSequence) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (m, tags) in enumerate(zip(tracked.meshes, tracked.provenance)):
        write_mesh(directory / MESH_NAME.format(i), m)
        with open(directory / PROVENANCE_NAME.format(i), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["vertex_id", "provenance"])
            wr.writerows(enumerate(tags.tolist()))
    if tracked.partition is not None:
        write_partition_report(directory / "partition.txt", tracked.partition)
    if tracked.scores:
        write_scores_csv(directory / "scores.csv", tracked.scores)
    if tracked.patches is not None:
        write_patch_csv(directory / "patches.csv", tracked.patches)


def read_tracked_meshes(directory: str | Path) -> list[TriangleMesh]:
    directory = Path(directory)
    out = []
    while (directory / MESH_NAME.format(len(out))).exists():
        out.append(read_mesh(directory / MESH_NAME.format(len(out))))
    if not out:
        raise FileNotFoundError(f"no tracked meshes in {directory}")
    return out
