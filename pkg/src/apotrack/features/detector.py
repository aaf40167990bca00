"""Difference-of-Gaussians keypoints with gradient-orientation descriptors.

A compact SIFT-class detector: scale-space extrema of the DoG stack, one
quadratic refinement step per candidate, contrast and edge-response
filtering, dominant-orientation assignment from a 36-bin histogram, and a
4x4x8 descriptor computed in the rotated keypoint frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

from ..imaging import Image, sample_bilinear

logger = logging.getLogger(__name__)

DESCRIPTOR_SIZE = 128


@dataclass(frozen=True)
class DetectorParams:
    sigma: float = 1.6
    intervals: int = 3
    assumed_blur: float = 0.5
    contrast_threshold: float = 0.04
    edge_ratio: float = 10.0
    border: int = 5
    min_octave_size: int = 16
    orientation_bins: int = 36
    peak_ratio: float = 0.8
    max_features: int = 0  # 0 keeps every keypoint


@dataclass(frozen=True)
class Feature:
    x: float
    y: float
    scale: float
    orientation: float
    descriptor: np.ndarray

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


class FeatureSet:
    """Struct-of-arrays keypoint container (positions ``(N, 2)`` as ``(x, y)``)."""

    def __init__(self, positions, scales, orientations, descriptors):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(-1)
        self.orientations = np.asarray(orientations, dtype=np.float64).reshape(-1)
        self.descriptors = np.asarray(descriptors, dtype=np.float32).reshape(-1, DESCRIPTOR_SIZE)
        n = len(self.positions)
        if not (len(self.scales) == len(self.orientations) == len(self.descriptors) == n):
            raise ValueError("feature arrays have inconsistent lengths")

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, DESCRIPTOR_SIZE)))

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Feature:
        x, y = self.positions[i]
        return Feature(float(x), float(y), float(self.scales[i]), float(self.orientations[i]),
                       self.descriptors[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.intp)
        return FeatureSet(self.positions[idx], self.scales[idx], self.orientations[idx],
                          self.descriptors[idx])


def _octaves(pixels: np.ndarray, p: DetectorParams):
    k = 2.0 ** (1.0 / p.intervals)
    n_scales = p.intervals + 3
    sigmas = [p.sigma * k ** s for s in range(n_scales)]
    base = gaussian_filter(pixels, math.sqrt(max(p.sigma ** 2 - p.assumed_blur ** 2, 0.01)), mode="nearest")
    octaves = []
    img = base
    while min(img.shape) >= p.min_octave_size:
        stack = [img]
        for s in range(1, n_scales):
            inc = math.sqrt(sigmas[s] ** 2 - sigmas[s - 1] ** 2)
            stack.append(gaussian_filter(stack[-1], inc, mode="nearest"))
        gauss = np.stack(stack)
        octaves.append(gauss)
        img = gauss[p.intervals][::2, ::2]
    return octaves


def _refine(dog, s, y, x, p: DetectorParams):
    """One Newton step on the DoG quadratic; returns ``(offset, value)`` or ``None``."""
    c = dog[s, y, x]
    dx = 0.5 * (dog[s, y, x + 1] - dog[s, y, x - 1])
    dy = 0.5 * (dog[s, y + 1, x] - dog[s, y - 1, x])
    ds = 0.5 * (dog[s + 1, y, x] - dog[s - 1, y, x])
    dxx = dog[s, y, x + 1] - 2 * c + dog[s, y, x - 1]
    dyy = dog[s, y + 1, x] - 2 * c + dog[s, y - 1, x]
    dss = dog[s + 1, y, x] - 2 * c + dog[s - 1, y, x]
    dxy = 0.25 * (dog[s, y + 1, x + 1] - dog[s, y + 1, x - 1] - dog[s, y - 1, x + 1] + dog[s, y - 1, x - 1])
    dxs = 0.25 * (dog[s + 1, y, x + 1] - dog[s + 1, y, x - 1] - dog[s - 1, y, x + 1] + dog[s - 1, y, x - 1])
    dys = 0.25 * (dog[s + 1, y + 1, x] - dog[s + 1, y - 1, x] - dog[s - 1, y + 1, x] + dog[s - 1, y - 1, x])
    tr = dxx + dyy
    det2 = dxx * dyy - dxy * dxy
    if det2 <= 0 or tr * tr / det2 >= (p.edge_ratio + 1) ** 2 / p.edge_ratio:
        return None
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    grad = np.array([dx, dy, ds])
    try:
        off = -np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.abs(off) > 1.0):
        return None
    value = c + 0.5 * grad @ off
    if abs(value) < p.contrast_threshold / p.intervals:
        return None
    return off, value


def _gradients(img: np.ndarray):
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def _orientations(mag, ang, x, y, sigma, p: DetectorParams) -> list[float]:
    radius = int(round(3 * 1.5 * sigma))
    h, w = mag.shape
    y0, y1 = max(int(round(y)) - radius, 0), min(int(round(y)) + radius + 1, h)
    x0, x1 = max(int(round(x)) - radius, 0), min(int(round(x)) + radius + 1, w)
    if y1 <= y0 or x1 <= x0:
        return []
    yy, xx = np.mgrid[y0:y1, x0:x1]
    wgt = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * (1.5 * sigma) ** 2)) * mag[y0:y1, x0:x1]
    nb = p.orientation_bins
    bins = np.floor((ang[y0:y1, x0:x1] % (2 * np.pi)) / (2 * np.pi) * nb).astype(int) % nb
    hist = np.bincount(bins.ravel(), weights=wgt.ravel(), minlength=nb)
    for _ in range(2):
        hist = 0.25 * np.roll(hist, 1) + 0.5 * hist + 0.25 * np.roll(hist, -1)
    peak = hist.max()
    if peak <= 0:
        return []
    out = []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    for b in np.flatnonzero((hist > left) & (hist > right) & (hist >= p.peak_ratio * peak)):
        denom = left[b] - 2 * hist[b] + right[b]
        shift = 0.5 * (left[b] - right[b]) / denom if denom != 0 else 0.0
        out.append(((b + 0.5 + shift) / nb * 2 * np.pi) % (2 * np.pi))
    return out


def _descriptors(img: np.ndarray, x, y, sigma, theta) -> np.ndarray:
    """4x4 spatial cells x 8 orientation bins sampled on a rotated 16x16 grid.

    Vectorized over keypoints: ``x, y, sigma, theta`` are ``(K,)`` arrays.
    """
    k = len(x)
    cell = (3.0 * sigma)[:, None, None]
    grid = (np.arange(16) - 7.5) / 4.0  # cell units in [-1.875, 1.875]
    gu, gv = np.meshgrid(grid, grid)
    c = np.cos(theta)[:, None, None]
    s = np.sin(theta)[:, None, None]
    px = x[:, None, None] + cell * (c * gu - s * gv)
    py = y[:, None, None] + cell * (s * gu + c * gv)
    step = cell / 4.0
    ex = sample_bilinear(img, px + step * c, py + step * s) - sample_bilinear(img, px - step * c, py - step * s)
    ey = (sample_bilinear(img, px - step * s, py + step * c)
          - sample_bilinear(img, px + step * s, py - step * c))
    mag = np.hypot(ex, ey) * np.exp(-(gu ** 2 + gv ** 2) / (2 * 2.0 ** 2))
    ori = np.arctan2(ey, ex) % (2 * np.pi)
    # trilinear voting into (cell_y, cell_x, orientation) with a one-cell guard band
    cu = np.broadcast_to(gu + 1.5, mag.shape)
    cv = np.broadcast_to(gv + 1.5, mag.shape)
    co = ori / (2 * np.pi) * 8
    iu0, iv0, io0 = np.floor(cu).astype(int), np.floor(cv).astype(int), np.floor(co).astype(int)
    fu, fv, fo = cu - iu0, cv - iv0, co - io0
    kk = np.arange(k)[:, None, None]
    idx, wts = [], []
    for du in (0, 1):
        wu = fu if du else 1 - fu
        for dv in (0, 1):
            wv = fv if dv else 1 - fv
            for do in (0, 1):
                wo = fo if do else 1 - fo
                idx.append((((kk * 6 + iv0 + dv + 1) * 6 + iu0 + du + 1) * 8 + (io0 + do) % 8).ravel())
                wts.append((mag * wu * wv * wo).ravel())
    hist = np.bincount(np.concatenate(idx), weights=np.concatenate(wts), minlength=k * 288)
    desc = hist.reshape(k, 6, 6, 8)[:, 1:5, 1:5, :].reshape(k, DESCRIPTOR_SIZE)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    ok = norm[:, 0] > 0
    desc[ok] = np.minimum(desc[ok] / norm[ok], 0.2)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    desc[ok] /= norm[ok]
    return desc


def detect_features(img: Image | np.ndarray, params: DetectorParams | None = None) -> FeatureSet:
    """Detect scale- and rotation-invariant keypoints, ordered by ``(y, x, scale)``.

    Positions are rounded to float32 so cached features reproduce exactly.
    """
    p = params or DetectorParams()
    pixels = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if min(pixels.shape) < 16:
        raise ValueError(f"image too small for feature detection: {pixels.shape[1]}x{pixels.shape[0]}")
    prefilter = 0.5 * p.contrast_threshold / p.intervals

    rows = []
    for o, gauss in enumerate(_octaves(pixels, p)):
        dog = gauss[1:] - gauss[:-1]
        mx = maximum_filter(dog, size=3, mode="nearest")
        mn = minimum_filter(dog, size=3, mode="nearest")
        cand = ((dog == mx) | (dog == mn)) & (np.abs(dog) > prefilter)
        cand[0] = cand[-1] = False
        b = p.border
        cand[:, :b, :] = cand[:, -b:, :] = False
        cand[:, :, :b] = cand[:, :, -b:] = False
        grads = {}
        pending: dict[int, list] = {}
        factor = 2.0 ** o
        for s, y, x in zip(*np.nonzero(cand)):
            # plateaus are not extrema
            patch = dog[s - 1:s + 2, y - 1:y + 2, x - 1:x + 2]
            v = dog[s, y, x]
            if np.count_nonzero(patch == v) > 1:
                continue
            ref = _refine(dog, s, y, x, p)
            if ref is None:
                continue
            off, _ = ref
            ss = s + off[2]
            sigma_oct = p.sigma * 2.0 ** (ss / p.intervals)
            layer = int(np.clip(round(ss), 0, gauss.shape[0] - 1))
            if layer not in grads:
                grads[layer] = _gradients(gauss[layer])
            mag, ang = grads[layer]
            xo, yo = x + off[0], y + off[1]
            for theta in _orientations(mag, ang, xo, yo, sigma_oct, p):
                pending.setdefault(layer, []).append((xo, yo, sigma_oct, theta))
        for layer, kps in sorted(pending.items()):
            arr = np.array(kps)
            descs = _descriptors(gauss[layer], arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
            for (xo, yo, sg, theta), desc in zip(kps, descs):
                rows.append((yo * factor, xo * factor, sg * factor, theta, desc))

    if not rows:
        return FeatureSet.empty()
    pos = np.array([[r[1], r[0]] for r in rows], dtype=np.float32).astype(np.float64)
    scales = np.array([r[2] for r in rows], dtype=np.float32).astype(np.float64)
    oris = np.array([r[3] for r in rows], dtype=np.float32).astype(np.float64)
    descs = np.array([r[4] for r in rows], dtype=np.float32)
    h, w = pixels.shape
    inside = (pos[:, 0] >= 0) & (pos[:, 0] <= w - 1) & (pos[:, 1] >= 0) & (pos[:, 1] <= h - 1)
    inside &= np.linalg.norm(descs, axis=1) > 0
    order = np.lexsort((oris, scales, pos[:, 0], pos[:, 1]))
    order = order[inside[order]]
    feats = FeatureSet(pos[order], scales[order], oris[order], descs[order])
    if p.max_features and len(feats) > p.max_features:
        feats = feats.subset(np.sort(np.argsort(-feats.scales, kind="stable")[: p.max_features]))
    logger.debug("detected %d features", len(feats))
    return feats
