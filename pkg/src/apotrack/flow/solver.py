"""Coarse-to-fine Horn-Schunck style flow estimation.

At every pyramid level the second image is warped by the current flow, the
brightness-constancy term is linearized around it, and the resulting
quadratic energy

    E(w) = sum_p g_p (Ix du + Iy dv + It)^2 + lambda * sum_{p~q} |w_p - w_q|^2

(``du, dv`` the increment over the warped flow, ``p~q`` the 4-neighbour
edges inside the frame, ``g_p = 1 / (|grad I|^2 + zeta^2)`` a constraint
normalization that keeps ``lambda`` independent of image contrast) is
minimized by red-black block SOR. Pixels of one
colour have no neighbours of the same colour, so a half-sweep solves every
2x2 pixel system exactly and concurrently; with ``0 < omega < 2`` each
half-sweep cannot increase E.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.ndimage import gaussian_filter

from ..imaging import Image, sample_bilinear
from .field import FlowField, check_same_shape


@dataclass(frozen=True)
class SolverParams:
    levels: int = 4
    scale: float = 0.5
    iterations: int = 100
    smoothness: float = 15.0
    warps: int = 1
    omega: float = 1.8
    presmooth: float = 1.0
    min_size: int = 16
    normalization: float = 0.01
    backend: str = "numba"

    def validate(self) -> None:
        if self.smoothness <= 0:
            raise ValueError("smoothness weight must be positive")
        if not 0.0 < self.scale < 1.0:
            raise ValueError("pyramid scale must lie in (0, 1)")
        if self.levels < 1 or self.iterations < 1 or self.warps < 1:
            raise ValueError("levels, iterations and warps must be >= 1")
        if not 0.0 < self.omega < 2.0:
            raise ValueError("SOR relaxation must lie in (0, 2)")
        if self.backend not in ("numba", "numpy"):
            raise ValueError(f"unknown solver backend {self.backend!r}")


@dataclass
class SolverTrace:
    """Linearized energy after every sweep, one list per (level, warp)."""

    energies: list[list[float]] = field(default_factory=list)


def resize(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment."""
    h, w = arr.shape[:2]
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(arr, gx, gy)


def _pyramid(img: np.ndarray, params: SolverParams) -> list[np.ndarray]:
    levels = [img]
    for _ in range(params.levels - 1):
        h, w = levels[-1].shape
        nh, nw = int(round(h * params.scale)), int(round(w * params.scale))
        if min(nh, nw) < params.min_size:
            break
        sigma = 1.0 / (2.0 * params.scale) * 0.8
        levels.append(resize(gaussian_filter(levels[-1], sigma, mode="nearest"), (nh, nw)))
    return levels


def warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp ``img`` so that ``out(x) = img(x + flow(x))``."""
    h, w = img.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample_bilinear(img, gx + flow[..., 0], gy + flow[..., 1])


def _neighbour_sum(f: np.ndarray) -> np.ndarray:
    s = np.zeros_like(f)
    s[1:, :] += f[:-1, :]
    s[:-1, :] += f[1:, :]
    s[:, 1:] += f[:, :-1]
    s[:, :-1] += f[:, 1:]
    return s


def _neighbour_count(shape: tuple[int, int]) -> np.ndarray:
    return _neighbour_sum(np.ones(shape))


@numba.njit(cache=True)
def _half_sweep(u, v, a11, a22, a12, det, bu, bv, lam, omega, colour):
    h, w = u.shape
    for y in range(h):
        for x in range((y + colour) % 2, w, 2):
            su = 0.0
            sv = 0.0
            if y > 0:
                su += u[y - 1, x]
                sv += v[y - 1, x]
            if y < h - 1:
                su += u[y + 1, x]
                sv += v[y + 1, x]
            if x > 0:
                su += u[y, x - 1]
                sv += v[y, x - 1]
            if x < w - 1:
                su += u[y, x + 1]
                sv += v[y, x + 1]
            ru = lam * su + bu[y, x]
            rv = lam * sv + bv[y, x]
            us = (a22[y, x] * ru - a12[y, x] * rv) / det[y, x]
            vs = (a11[y, x] * rv - a12[y, x] * ru) / det[y, x]
            u[y, x] += omega * (us - u[y, x])
            v[y, x] += omega * (vs - v[y, x])


def _half_sweep_numpy(u, v, a11, a22, a12, det, bu, bv, lam, omega, colour):
    """Vectorized reference for :func:`_half_sweep` (same update, array form)."""
    yy, xx = np.mgrid[0:u.shape[0], 0:u.shape[1]]
    mask = ((yy + xx) % 2) == colour
    ru = lam * _neighbour_sum(u) + bu
    rv = lam * _neighbour_sum(v) + bv
    us = (a22 * ru - a12 * rv) / det
    vs = (a11 * rv - a12 * ru) / det
    u[mask] += omega * (us - u)[mask]
    v[mask] += omega * (vs - v)[mask]


def linearized_energy(ix, iy, c, u, v, lam) -> float:
    """Energy of total flow ``(u, v)`` for data residual ``ix*u + iy*v + c``."""
    data = ix * u + iy * v + c
    smooth = (np.sum(np.diff(u, axis=0) ** 2) + np.sum(np.diff(u, axis=1) ** 2)
              + np.sum(np.diff(v, axis=0) ** 2) + np.sum(np.diff(v, axis=1) ** 2))
    return float(np.sum(data * data) + lam * smooth)


def _solve_level(a, b_warped, flow, params: SolverParams, trace: SolverTrace | None):
    lam = params.smoothness
    ix_a, iy_a = np.gradient(a, axis=1), np.gradient(a, axis=0)
    ix_b, iy_b = np.gradient(b_warped, axis=1), np.gradient(b_warped, axis=0)
    ix = 0.5 * (ix_a + ix_b)
    iy = 0.5 * (iy_a + iy_b)
    it = b_warped - a
    if params.normalization > 0:
        # constraint normalization: the data term weights 1 / (|grad I|^2 + zeta^2)
        wn = 1.0 / np.sqrt(ix * ix + iy * iy + params.normalization ** 2)
        ix, iy, it = ix * wn, iy * wn, it * wn
    u = flow[..., 0].copy()
    v = flow[..., 1].copy()
    # data residual in terms of total flow: ix*u + iy*v + c
    c = it - ix * u - iy * v

    n = _neighbour_count(a.shape)
    ln = lam * n
    a11 = ix * ix + ln
    a22 = iy * iy + ln
    a12 = ix * iy
    det = a11 * a22 - a12 * a12
    bu = -ix * c
    bv = -iy * c
    sweep = _half_sweep_numpy if params.backend == "numpy" else _half_sweep

    energies = []
    for _ in range(params.iterations):
        for colour in (0, 1):
            sweep(u, v, a11, a22, a12, det, bu, bv, lam, params.omega, colour)
        if trace is not None:
            energies.append(linearized_energy(ix, iy, c, u, v, lam))
    if trace is not None:
        trace.energies.append(energies)
    return np.stack([u, v], axis=-1)


def estimate_flow(a: Image, b: Image, params: SolverParams | None = None,
                  trace: SolverTrace | None = None) -> FlowField:
    """Dense flow ``w`` with ``a(x) ~ b(x + w(x))``. Deterministic for fixed params.

    The returned field is rounded to float32, the precision of the on-disk cache.
    """
    params = params or SolverParams()
    params.validate()
    check_same_shape(a, b)
    pa = a.pixels if isinstance(a, Image) else np.asarray(a, dtype=np.float64)
    pb = b.pixels if isinstance(b, Image) else np.asarray(b, dtype=np.float64)
    if params.presmooth > 0:
        pa = gaussian_filter(pa, params.presmooth, mode="nearest")
        pb = gaussian_filter(pb, params.presmooth, mode="nearest")
    pyr_a = _pyramid(pa, params)
    pyr_b = _pyramid(pb, params)

    flow = np.zeros(pyr_a[-1].shape + (2,))
    for level in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if flow.shape[:2] != la.shape:
            sy = la.shape[0] / flow.shape[0]
            sx = la.shape[1] / flow.shape[1]
            flow = resize(flow, la.shape)
            flow[..., 0] *= sx
            flow[..., 1] *= sy
        for _ in range(params.warps):
            flow = _solve_level(la, warp(lb, flow), flow, params, trace)
    return FlowField(flow.astype(np.float32))
