"""Synthetic non-rigid sequences with exact ground-truth trajectories.

A reference texture point ``p`` is carried to ``p + D_t(p)`` where

    D_t(p) = sum_m s_m(t) * sum_c d_mc * exp(-|p - c|^2 / (2 sigma^2))

over a coarse lattice of control points ``c``. Each mode ``m`` oscillates as
``s_m(t) = sin(2 pi k_m t / R + phi_m) - sin(phi_m)`` with integer harmonic
``k_m``, so the deformation is the identity at ``t = 0`` and again every
``R = return_interval`` frames. Frames are rendered by inverting the forward
map with a fixed-point iteration and sampling the texture bilinearly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import Image, quantize16, sample_bilinear, write_image
from .mesh import TriangleMesh, lattice_mesh, lattice_shape, write_mesh

FRAME_NAME = "frame_{:04d}.png"
GT_NAME = "gt_{:04d}.csv"


class FoldOverError(ValueError):
    pass


def generate_texture(width: int, height: int, seed: int = 0, scales=(1.0, 2.0, 4.0, 8.0),
                     contrast: float = 0.18) -> np.ndarray:
    """Multi-scale band-limited noise in [0, 1] with mean 0.5."""
    rng = np.random.default_rng(seed)
    acc = np.zeros((height, width))
    for s in scales:
        layer = gaussian_filter(rng.standard_normal((height, width)), s, mode="wrap")
        acc += layer / layer.std()
    acc /= acc.std()
    return np.clip(0.5 + contrast * acc, 0.0, 1.0)


@dataclass(frozen=True)
class DeformationModel:
    """Sinusoidally animated Gaussian-RBF displacement over a control lattice.

    ``displacements`` has shape ``(modes, controls, 2)``; ``harmonics`` are
    the integer cycles per return interval of every mode.
    """

    controls: np.ndarray  # (C, 2)
    displacements: np.ndarray  # (M, C, 2) pixels
    harmonics: tuple[int, ...]
    phases: tuple[float, ...]
    sigma: float
    return_interval: int

    def __post_init__(self):
        c = np.asarray(self.controls, dtype=np.float64).reshape(-1, 2)
        d = np.asarray(self.displacements, dtype=np.float64).reshape(len(self.harmonics), len(c), 2)
        if len(self.phases) != len(self.harmonics):
            raise ValueError("one phase per mode is required")
        if self.sigma <= 0 or self.return_interval < 1:
            raise ValueError("sigma and return_interval must be positive")
        if any(int(k) != k or k < 1 for k in self.harmonics):
            raise ValueError("harmonics must be positive integers")
        for a in (c, d):
            a.setflags(write=False)
        object.__setattr__(self, "controls", c)
        object.__setattr__(self, "displacements", d)

    @classmethod
    def random(cls, width: int, height: int, amplitude: float = 6.0, return_interval: int = 40,
               spacing: float = 64.0, harmonics=(1, 2), seed: int = 0) -> "DeformationModel":
        """Smooth random modes whose combined peak displacement is about ``amplitude``."""
        rng = np.random.default_rng(seed)
        nx = max(2, int(round(width / spacing)) + 1)
        ny = max(2, int(round(height / spacing)) + 1)
        gx, gy = np.meshgrid(np.linspace(0, width - 1, nx), np.linspace(0, height - 1, ny))
        controls = np.stack([gx.ravel(), gy.ravel()], axis=1)
        m = len(harmonics)
        disp = rng.standard_normal((m, len(controls), 2))
        sigma = spacing * 0.75
        model = cls(controls, disp, tuple(int(k) for k in harmonics),
                    tuple(float(p) for p in rng.uniform(0, 2 * np.pi, m)), sigma, return_interval)
        if amplitude == 0:
            return cls(controls, disp * 0.0, model.harmonics, model.phases, sigma, return_interval)
        # normalize each mode's spatial peak, then share the amplitude between modes
        ys, xs = np.mgrid[0:height:8, 0:width:8]
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        basis = model.basis(pts)
        for k in range(m):
            peak = np.max(np.linalg.norm(basis @ disp[k], axis=1))
            disp[k] *= amplitude / (m * peak)
        return cls(controls, disp, model.harmonics, model.phases, sigma, return_interval)

    @property
    def modes(self) -> int:
        return len(self.harmonics)

    def frequencies(self, frames: int) -> list[float]:
        """Cycles per sequence of ``frames`` frames for every mode."""
        return [k * frames / self.return_interval for k in self.harmonics]

    def signal(self, t: float) -> np.ndarray:
        k = np.asarray(self.harmonics, dtype=np.float64)
        ph = np.asarray(self.phases)
        return np.sin(2 * np.pi * k * t / self.return_interval + ph) - np.sin(ph)

    def basis(self, points: np.ndarray) -> np.ndarray:
        """RBF weights ``(N, C)`` of the points."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        d2 = ((p[:, None, :] - self.controls[None, :, :]) ** 2).sum(-1)
        return np.exp(-d2 / (2 * self.sigma ** 2))

    def field_coefficients(self, t: float) -> np.ndarray:
        """Control displacements ``(C, 2)`` at time ``t``."""
        return np.tensordot(self.signal(t), self.displacements, axes=1)

    def displacement(self, points: np.ndarray, t: float) -> np.ndarray:
        return self.basis(points) @ self.field_coefficients(t)

    def warp_points(self, points: np.ndarray, t: float) -> np.ndarray:
        """Exact positions at time ``t`` of reference points."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return points + self.displacement(points, t)

    def jacobian_det(self, points: np.ndarray, t: float) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        phi = self.basis(p)
        coef = self.field_coefficients(t)
        diff = p[:, None, :] - self.controls[None, :, :]  # (N, C, 2)
        dphi = -phi[..., None] * diff / self.sigma ** 2  # d phi / d(x, y)
        # J = I + sum_c coef_c (outer) grad phi_c
        j = np.einsum("ci,ncj->nij", coef, dphi)
        return (1 + j[:, 0, 0]) * (1 + j[:, 1, 1]) - j[:, 0, 1] * j[:, 1, 0]


@dataclass(frozen=True)
class BenchmarkConfig:
    frames: int = 237
    width: int = 500
    height: int = 500
    annotations: int = 160
    seed: int = 0
    amplitude: float = 10.0
    return_interval: int = 40
    control_spacing: float = 96.0
    harmonics: str = "1,2"
    margin: int = 48
    inset: float = 0.15
    texture_contrast: float = 0.18
    render_iterations: int = 20
    degradation: str = "none"
    gaussian_sigma: float = 0.03
    sp_density: float = 0.05
    occluder_size: int = 60
    occluder_radius: float = 0.25
    occluder_period: int = 60

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a benchmark needs at least two frames")
        if min(self.width, self.height) < 32:
            raise ValueError("frames must be at least 32x32")
        if self.amplitude < 0 or self.margin < 0:
            raise ValueError("amplitude and margin must be non-negative")
        if not 0 <= self.inset < 0.5:
            raise ValueError("inset must lie in [0, 0.5)")
        self.degradation_spec()

    def harmonic_tuple(self) -> tuple[int, ...]:
        return tuple(int(t) for t in self.harmonics.split(",") if t.strip())

    def model(self) -> DeformationModel:
        return DeformationModel.random(self.width, self.height, self.amplitude, self.return_interval,
                                       self.control_spacing, self.harmonic_tuple(), self.seed)

    def degradation_spec(self) -> "DegradationSpec":
        return DegradationSpec(self.degradation, self.occluder_size, self.occluder_radius, self.occluder_period,
                               self.gaussian_sigma, self.sp_density)


@dataclass
class Benchmark:
    frames: list[np.ndarray]
    mesh: TriangleMesh
    ground_truth: np.ndarray  # (frames, points, 2)
    model: DeformationModel
    config: BenchmarkConfig
    texture: np.ndarray = field(repr=False, default=None)

    def images(self) -> list[Image]:
        return [Image(f) for f in self.frames]


def annotation_mesh(width: int, height: int, count: int, inset: float) -> TriangleMesh:
    nx, ny = lattice_shape(count, width / height)
    return lattice_mesh(inset * (width - 1), inset * (height - 1), (1 - inset) * (width - 1),
                        (1 - inset) * (height - 1), nx, ny)


class FrameRenderer:
    """Renders frames of one texture and model; the RBF basis is computed once."""

    def __init__(self, texture: np.ndarray, model: DeformationModel, width: int, height: int, margin: int,
                 iterations: int = 30):
        self.texture, self.model = texture, model
        self.width, self.height, self.margin, self.iterations = width, height, margin, iterations
        th, tw = texture.shape
        py, px = np.mgrid[0:th, 0:tw].astype(np.float64)
        self._basis = model.basis(np.stack([px.ravel() - margin, py.ravel() - margin], axis=1))

    def render(self, t: float) -> np.ndarray:
        """Frame ``t``: each pixel ``x`` shows the texture at ``p`` with ``p + D_t(p) = x``."""
        m, w, h = self.margin, self.width, self.height
        if not np.any(self.model.signal(t)):
            return self.texture[m:m + h, m:m + w].copy()
        # dense displacement on the padded texture grid, sampled bilinearly during the inversion
        dense = (self._basis @ self.model.field_coefficients(t)).reshape(self.texture.shape + (2,))
        gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
        px, py = gx.copy(), gy.copy()
        for _ in range(self.iterations):
            d = sample_bilinear(dense, px + m, py + m)
            px, py = gx - d[..., 0], gy - d[..., 1]
        return sample_bilinear(self.texture, px + m, py + m)


def render_frame(texture: np.ndarray, model: DeformationModel, t: float, width: int, height: int,
                 margin: int, iterations: int = 30) -> np.ndarray:
    return FrameRenderer(texture, model, width, height, margin, iterations).render(t)


def generate_sequence(config: BenchmarkConfig | None = None, texture: np.ndarray | None = None) -> Benchmark:
    """Render the sequence and ground truth; frame 0 of the clean sequence is the texture crop."""
    config = config or BenchmarkConfig()
    w, h, m = config.width, config.height, config.margin
    if texture is None:
        texture = generate_texture(w + 2 * m, h + 2 * m, config.seed, contrast=config.texture_contrast)
    if texture.shape[0] < h + 2 * m or texture.shape[1] < w + 2 * m:
        raise ValueError("texture too small for the frame size and margin")
    texture = quantize16(texture)
    model = config.model()
    mesh = annotation_mesh(w, h, config.annotations, config.inset)
    ys, xs = np.mgrid[0:h:4, 0:w:4]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    renderer = FrameRenderer(texture, model, w, h, m, config.render_iterations)
    frames, gt = [], []
    for t in range(config.frames):
        if np.min(model.jacobian_det(grid, t)) <= 0:
            raise FoldOverError(f"deformation folds over at frame {t}")
        frames.append(quantize16(renderer.render(t)))
        gt.append(model.warp_points(mesh.vertices, t))
    bench = Benchmark(frames, mesh, np.stack(gt), model, config, texture)
    deg = config.degradation_spec()
    if deg.mode != "none":
        bench.frames = degrade(bench.frames, deg, config.seed)
    return bench


@dataclass(frozen=True)
class DegradationSpec:
    mode: str = "none"
    occluder_size: int = 60
    occluder_radius: float = 0.25  # path radius as a fraction of the smaller frame side
    occluder_period: int = 60  # frames per revolution
    gaussian_sigma: float = 0.03
    sp_density: float = 0.05
    occluder_value: float = 0.0

    def __post_init__(self):
        if self.mode not in ("none", "occlusion", "gaussian", "salt_pepper"):
            raise ValueError(f"unknown degradation mode {self.mode!r}")
        if min(self.occluder_size, self.occluder_radius, self.occluder_period, self.gaussian_sigma) < 0:
            raise ValueError("degradation parameters must be non-negative")
        if not 0.0 <= self.sp_density <= 1.0:
            raise ValueError("sp_density must lie in [0, 1]")

    def occluder_box(self, frame: int, width: int, height: int) -> tuple[int, int, int, int]:
        """``(x0, y0, x1, y1)`` of the occluder on ``frame``, clipped to the image."""
        r = self.occluder_radius * min(width, height)
        a = 2 * np.pi * frame / max(self.occluder_period, 1)
        cx = (width - 1) / 2 + r * math.cos(a)
        cy = (height - 1) / 2 + r * math.sin(a)
        half = self.occluder_size / 2
        x0, y0 = int(round(cx - half)), int(round(cy - half))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1 = min(x0 + self.occluder_size, width)
        y1 = min(y0 + self.occluder_size, height)
        return x0, y0, x1, y1


def degrade_frame(frame: np.ndarray, deg: DegradationSpec, seed: int, index: int) -> np.ndarray:
    """One degraded frame; the random stream depends only on ``(seed, index)``."""
    out = np.array(frame, dtype=np.float64)
    if deg.mode == "none":
        return out
    rng = np.random.default_rng([seed, index])
    h, w = out.shape
    if deg.mode == "occlusion":
        x0, y0, x1, y1 = deg.occluder_box(index, w, h)
        out[y0:y1, x0:x1] = deg.occluder_value
    elif deg.mode == "gaussian":
        out = np.clip(out + deg.gaussian_sigma * rng.standard_normal(out.shape), 0.0, 1.0)
    elif deg.mode == "salt_pepper":
        hit = rng.random(out.shape) < deg.sp_density
        salt = rng.random(out.shape) < 0.5
        out[hit] = np.where(salt[hit], 1.0, 0.0)
    return quantize16(out)


def degrade(frames, deg: DegradationSpec, seed: int = 0) -> list[np.ndarray]:
    if deg.mode == "none":
        return [np.array(f, copy=True) for f in frames]
    return [degrade_frame(f, deg, seed, i) for i, f in enumerate(frames)]


def write_ground_truth(path: str | Path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["point_id", "x", "y"])
        for i, (x, y) in enumerate(np.asarray(points).tolist()):
            wr.writerow([i, repr(x), repr(y)])


def read_ground_truth(path: str | Path) -> dict[int, tuple[float, float]]:
    with open(path, newline="") as fh:
        return {int(r["point_id"]): (float(r["x"]), float(r["y"])) for r in csv.DictReader(fh)}


def write_benchmark(directory: str | Path, bench: Benchmark) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(bench.frames):
        write_image(directory / FRAME_NAME.format(t), f)
        write_ground_truth(directory / GT_NAME.format(t), bench.ground_truth[t])
    write_mesh(directory / "mesh_ref.txt", bench.mesh)
    manifest = {
        "kind": "benchmark",
        "config": asdict(bench.config),
        "frequencies": bench.model.frequencies(bench.config.frames),
        "phases": list(bench.model.phases),
        "frames": len(bench.frames),
        "points": int(bench.ground_truth.shape[1]),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory
