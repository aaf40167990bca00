from __future__ import annotations

import numpy as np
import pytest
from conftest import textured
from hypothesis import given, settings
from hypothesis import strategies as st

from apotrack.anchors import Clip
from apotrack.config import PipelineConfig
from apotrack.features import FeatureMatchSet
from apotrack.flow import FlowChainCache, FlowField
from apotrack.imaging import Image
from apotrack.mesh import lattice_mesh, read_mesh
from apotrack.patches import AnchorPatch, PatchTable
from apotrack.propagation import (BLENDED, ELIMINATED, FLOW, PATCH, REPAIRED, advect_points, advect_vertex,
                                  baseline_track, candidate_errors, find_nearest_anchor_patch, propagate_clip,
                                  propagate_to_anchor, read_tracked_meshes, resolve_candidates, resolve_conflict,
                                  resolve_conflicts, subsample_mask, track_sequence, write_tracked)

SIZE = 96

finite_err = st.floats(0.0, 10.0, allow_nan=False)
coord = st.floats(-100.0, 100.0, allow_nan=False)


def _identity_matches(points, frame):
    n = len(points)
    return FeatureMatchSet(frame, np.arange(n), np.arange(n), points.copy(), points.copy(), np.zeros(n))


def _static_cache(n, size=SIZE):
    z = {k: FlowField.zeros(size, size) for k in range(n - 1)}
    return FlowChainCache(z, dict(z))


def _bump(center, amplitude, sigma=3.0, size=SIZE):
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    g = np.exp(-((xs - center[0]) ** 2 + (ys - center[1]) ** 2) / (2 * sigma**2))
    return FlowField(g[..., None] * np.asarray(amplitude, float))


@pytest.fixture(scope="module")
def frame():
    return Image(textured(SIZE, 21, scales=(1.0, 2.0)))


@pytest.fixture(scope="module")
def mesh():
    return lattice_mesh(20, 20, 76, 76, 5, 5)


# --- advection ------------------------------------------------------------------


def test_advect_constant_and_zero_fields():
    w = FlowField(np.broadcast_to([1.0, 2.0], (10, 10, 2)))
    assert advect_vertex((3.0, 4.0), w) == (4.0, 6.0)
    pts = np.array([[0.0, 0.0], [9.0, 9.0], [2.5, 7.25]])
    np.testing.assert_array_equal(advect_points(pts, FlowField.zeros(10, 10)), pts)


def test_advect_samples_bilinearly():
    v = np.zeros((4, 4, 2))
    v[:, 2:, 0] = 2.0
    assert advect_vertex((1.5, 1.0), FlowField(v)) == (2.5, 1.0)


def test_candidate_errors_undefined_at_border(frame):
    pts = np.array([[0.0, 10.0], [10.0, 10.0]])
    e = candidate_errors(frame, frame, pts, pts)
    assert np.isinf(e[0]) and e[1] == 0.0


# --- conflict resolution ----------------------------------------------------------


def test_resolve_examples():
    assert resolve_conflict((0, 0), (4, 0), 0.01, 0.03) == pytest.approx((1.0, 0.0))
    assert resolve_conflict((0, 0), (4, 2), 0.0, 0.0) == (2.0, 1.0)
    assert resolve_conflict((0, 0), (4, 2), 0.0, 0.5) == (0.0, 0.0)
    assert resolve_conflict((10, 10), (14, 10), 3.0, 1.0) == (13.0, 10.0)
    assert resolve_conflict((0.1, 0.7), (0.3, 0.9), 0.3, 0.0) == (0.3, 0.9)
    assert resolve_conflict((0, 0), (4, 2), np.inf, 0.5) == (4.0, 2.0)
    assert resolve_conflict((0, 0), (4, 2), 0.5, np.inf) == (0.0, 0.0)
    assert resolve_conflict((1, 1), (4, 2), np.inf, np.inf) == (1.0, 1.0)
    with pytest.raises(ValueError):
        resolve_conflict((0, 0), (1, 1), -0.1, 0.2)


@settings(max_examples=200, deadline=None)
@given(a=st.tuples(coord, coord), b=st.tuples(coord, coord), ea=finite_err, eb=finite_err)
def test_resolve_symmetric_and_on_segment(a, b, ea, eb):
    ab = np.array(resolve_conflict(a, b, ea, eb))
    ba = np.array(resolve_conflict(b, a, eb, ea))
    np.testing.assert_allclose(ab, ba, rtol=0, atol=1e-9)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(ab >= lo) and np.all(ab <= hi)
    d = np.subtract(b, a)
    if np.hypot(*d) > 1e-6:
        cross = d[0] * (ab[1] - a[1]) - d[1] * (ab[0] - a[0])
        assert abs(cross) <= 1e-7 * (1 + np.abs(d).max() ** 2)


@settings(max_examples=100, deadline=None)
@given(a=st.tuples(coord, coord), b=st.tuples(coord, coord), e=st.floats(1e-6, 10.0))
def test_equal_errors_give_midpoint(a, b, e):
    np.testing.assert_allclose(resolve_conflict(a, b, e, e), np.add(a, b) / 2, atol=1e-9)


def test_vectorized_matches_scalar(rng):
    vf, vp = rng.uniform(0, 50, (40, 2)), rng.uniform(0, 50, (40, 2))
    ef, ep = rng.uniform(0, 0.2, 40), rng.uniform(0, 0.2, 40)
    ef[::7] = np.inf
    ep[::5] = 0.0
    out = resolve_conflicts(vf, vp, ef, ep)
    for k in range(40):
        assert tuple(out[k]) == resolve_conflict(vf[k], vp[k], ef[k], ep[k])


def test_candidates_generalise_two_way_blend():
    assert resolve_candidates([(0, 0), (4, 0)], [0.01, 0.03]) == resolve_conflict((0, 0), (4, 0), 0.01, 0.03)
    out = resolve_candidates([(0, 0), (3, 0), (0, 3)], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(out, (1.0, 1.0))
    assert resolve_candidates([(0, 0), (3, 0), (0, 3)], [0.5, 0.0, 0.2]) == pytest.approx((3.0, 0.0))
    assert resolve_candidates([(0, 0), (3, 0), (0, 3)], [np.inf, 1.0, 1.0]) == (1.5, 1.5)
    assert resolve_candidates([(7, 7)], [np.inf]) == (7.0, 7.0)
    with pytest.raises(ValueError):
        resolve_candidates([(0, 0)], [])


# --- nearest anchor patch -------------------------------------------------------


def test_nearest_patch_examples():
    table = PatchTable([AnchorPatch(0, f, (float(f), 0.0), 0.01) for f in (3, 7, 12)])
    clip = Clip(0, 0, 10)
    assert find_nearest_anchor_patch(0, 5, table, clip).frame == 3
    assert find_nearest_anchor_patch(0, 6, table, clip).frame == 7
    assert find_nearest_anchor_patch(0, 7, table, clip).frame == 7
    # the frame-12 patch lies outside the clip
    assert find_nearest_anchor_patch(0, 9, table, clip).frame == 7
    assert find_nearest_anchor_patch(1, 5, table, clip) is None
    with pytest.raises(ValueError):
        find_nearest_anchor_patch(0, 10, table, clip)


# --- propagation to anchors ---------------------------------------------------------


def test_anchor_identity_scene(frame, mesh):
    frames = [frame] * 3
    out, tags, err = propagate_to_anchor(mesh, _static_cache(3), 2, frames, None, anchors=(0, 2))
    np.testing.assert_array_equal(out.vertices, mesh.vertices)
    assert set(tags) == {FLOW} and np.all(err == 0)
    with pytest.raises(ValueError):
        propagate_to_anchor(mesh, _static_cache(3), 1, frames, None, anchors=(0, 2))


def test_corrupted_vertex_is_repaired(frame, mesh):
    target_v = 12
    bump = _bump(mesh.vertices[target_v], (6.0, 0.0))
    cache = FlowChainCache({0: bump}, {0: FlowField.zeros(SIZE, SIZE)})
    feats = np.random.default_rng(3).uniform(10, 86, (80, 2))
    out, tags, err = propagate_to_anchor(mesh, cache, 1, [frame, frame], _identity_matches(feats, 1))
    assert tags[target_v] == REPAIRED
    assert np.hypot(*(out.vertices[target_v] - mesh.vertices[target_v])) < 1.0
    others = np.delete(np.arange(len(mesh)), target_v)
    assert set(tags[others]) == {FLOW}
    assert err[target_v] <= 0.08


def test_unrepairable_vertices_keep_flow(frame, mesh):
    shift = FlowField(np.broadcast_to([7.0, 5.0], (SIZE, SIZE, 2)))
    cache = FlowChainCache({0: shift}, {0: FlowField.zeros(SIZE, SIZE)})
    out, tags, err = propagate_to_anchor(mesh, cache, 1, [frame, frame], None)
    assert set(tags) == {ELIMINATED}
    np.testing.assert_array_equal(out.vertices, mesh.vertices + [7.0, 5.0])
    assert np.all(err > 0.08)


# --- clip propagation -----------------------------------------------------------


def test_single_frame_clip_is_empty(frame, mesh):
    assert propagate_clip(mesh, Clip(0, 0, 1), _static_cache(2), None, [frame, frame]) == {}


def test_clip_without_patches_is_pure_flow(frame, mesh):
    shift = FlowField(np.broadcast_to([0.5, 0.0], (SIZE, SIZE, 2)))
    back = FlowField(np.broadcast_to([-0.5, 0.0], (SIZE, SIZE, 2)))
    cache = FlowChainCache({k: shift for k in range(4)}, {k: back for k in range(4)})
    out = propagate_clip(mesh, Clip(2, 0, 5), cache, None, [frame] * 5)
    assert sorted(out) == [0, 1, 3, 4]
    for i, (pos, tags) in out.items():
        np.testing.assert_allclose(pos, mesh.vertices + [0.5 * (i - 2), 0.0], atol=1e-12)
        assert set(tags) == {FLOW}


def test_clip_blends_with_patches(frame, mesh):
    # the flow candidate for vertex 6 is wrong by 3 px, a patch has it right
    wrong = _bump(mesh.vertices[6], (3.0, 0.0), sigma=2.0)
    cache = FlowChainCache({0: wrong, 1: FlowField.zeros(SIZE, SIZE)},
                           {0: FlowField.zeros(SIZE, SIZE), 1: FlowField.zeros(SIZE, SIZE)})
    good = tuple(mesh.vertices[6])
    table = PatchTable([AnchorPatch(6, 1, good, 0.0)])
    out = propagate_clip(mesh, Clip(0, 0, 3), cache, table, [frame] * 3, ref_mesh=mesh)
    pos, tags = out[1]
    assert tags[6] == PATCH
    np.testing.assert_array_equal(pos[6], good)
    # frame 2 uses the frame-1 patch advected by a zero flow
    assert out[2][1][6] == PATCH
    assert set(np.delete(tags, 6)) == {FLOW}


def test_clip_blend_tag_for_intermediate_result(frame, mesh):
    table = PatchTable([AnchorPatch(3, 1, tuple(mesh.vertices[3] + [2.0, 0.0]), 0.05)])
    out = propagate_clip(mesh, Clip(0, 0, 2), _static_cache(2), table, [frame] * 2, ref_mesh=mesh)
    pos, tags = out[1]
    # the flow candidate scores zero, so it takes the whole weight
    assert tags[3] == FLOW
    np.testing.assert_array_equal(pos[3], mesh.vertices[3])
    half = PatchTable([AnchorPatch(3, 1, tuple(mesh.vertices[3] + [0.5, 0.0]), 0.05)])
    shift = FlowField(np.broadcast_to([-0.5, 0.0], (SIZE, SIZE, 2)))
    cache = FlowChainCache({0: shift}, {0: FlowField.zeros(SIZE, SIZE)})
    pos, tags = propagate_clip(mesh, Clip(0, 0, 2), cache, half, [frame] * 2, ref_mesh=mesh)[1]
    assert tags[3] == BLENDED
    assert mesh.vertices[3, 0] - 0.5 < pos[3, 0] < mesh.vertices[3, 0] + 0.5


# --- whole-sequence tracking ---------------------------------------------------------


@pytest.fixture(scope="module")
def small_config():
    return PipelineConfig(flow_iterations=20, flow_levels=2, workers=1)


def test_two_frame_static_sequence(frame, mesh, small_config):
    for mode in ("baseline", "anchor-frames", "apo"):
        tracked = track_sequence([frame, frame], mesh, small_config.replace(mode=mode))
        assert len(tracked) == 2
        np.testing.assert_allclose(tracked.meshes[1].vertices, mesh.vertices, atol=0.05)
        assert tracked.meshes[0] is mesh


def test_ablation_equals_baseline(frame, mesh, small_config):
    frames = [Image(np.roll(frame.pixels, k, axis=1)) for k in range(4)]
    cache = FlowChainCache({k: FlowField(np.broadcast_to([1.0, 0.2 * k], (SIZE, SIZE, 2))) for k in range(3)},
                           {k: FlowField(np.broadcast_to([-1.0, 0.0], (SIZE, SIZE, 2))) for k in range(3)})
    base = track_sequence(frames, mesh, small_config.replace(mode="baseline"), cache=cache)
    off = track_sequence(frames, mesh, small_config.replace(use_patches=False, use_anchor_frames=False),
                         cache=cache)
    for a, b in zip(base.positions(), off.positions()):
        assert np.array_equal(a, b)
    expected = baseline_track(mesh, cache, 4)
    assert np.array_equal(base.positions(), np.stack(expected))


def test_track_rejects_bad_input(frame, mesh, small_config):
    with pytest.raises(ValueError):
        track_sequence([frame], mesh, small_config)
    outside = mesh.with_vertices(mesh.vertices + 100)
    with pytest.raises(ValueError):
        track_sequence([frame, frame], outside, small_config)


def test_subsample_mask():
    m = subsample_mask(100, 0.3, 7)
    assert m.sum() == 30 and np.array_equal(m, subsample_mask(100, 0.3, 7))
    assert subsample_mask(10, 0.0, 1).sum() == 0 and subsample_mask(10, 1.0, 1).all()


def test_write_and_read_tracked(tmp_path, frame, mesh, small_config):
    tracked = track_sequence([frame, frame, frame], mesh, small_config)
    write_tracked(tmp_path, tracked)
    back = read_tracked_meshes(tmp_path)
    assert len(back) == 3
    for a, b in zip(back, tracked.meshes):
        assert np.array_equal(a.vertices, b.vertices)
    assert read_mesh(tmp_path / "mesh_0000.txt").same_topology(mesh)
    rows = (tmp_path / "provenance_0001.csv").read_text().splitlines()
    assert rows[0] == "vertex_id,provenance" and len(rows) == len(mesh) + 1
    assert (tmp_path / "partition.txt").exists() and (tmp_path / "scores.csv").exists()
    counts = tracked.provenance_counts()
    assert sum(counts.values()) == 3 * len(mesh)
    with pytest.raises(FileNotFoundError):
        read_tracked_meshes(tmp_path / "nothing")
