"""Grayscale frames, sequence discovery and sub-pixel sampling."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image as PILImage

LUMA = (0.299, 0.587, 0.114)


class SequenceError(ValueError):
    """Raised when a frame directory cannot be turned into a sequence."""


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable scalar-intensity frame with values in [0, 1].

    ``pixels`` is indexed ``[row, column]`` i.e. ``[y, x]``.
    """

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 3 or arr.shape[1] < 3:
            raise ValueError(f"image must be at least 3x3, got {arr.shape[1]}x{arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def sample(self, x, y):
        return sample_bilinear(self, x, y)


@dataclass(frozen=True)
class SequenceHandle:
    frame_paths: tuple[Path, ...]
    reference_index: int = 0
    size: tuple[int, int] = field(default=(0, 0))  # (width, height)

    def __post_init__(self):
        if len(self.frame_paths) < 2:
            raise SequenceError("a sequence needs at least 2 frames")
        if not 0 <= self.reference_index < len(self.frame_paths):
            raise SequenceError(f"reference index {self.reference_index} out of range")

    @property
    def frame_count(self) -> int:
        return len(self.frame_paths)

    def frame(self, index: int) -> Image:
        return read_image(self.frame_paths[index])

    def frames(self) -> list[Image]:
        return [self.frame(i) for i in range(self.frame_count)]


def to_gray(arr: np.ndarray) -> np.ndarray:
    """Luminance of an RGB(A) array; 2-D input is returned unchanged."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        return arr[..., 0] * LUMA[0] + arr[..., 1] * LUMA[1] + arr[..., 2] * LUMA[2]
    raise ValueError(f"cannot convert array of shape {arr.shape} to grayscale")


def read_image(path: str | Path) -> Image:
    """Decode a PNG/PGM frame into a normalized grayscale :class:`Image`."""
    with PILImage.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0 if mode.startswith("I;16") or arr.max() > 255 else 255.0
            gray = arr / peak
        elif mode == "F":
            gray = np.asarray(im, dtype=np.float64)
        elif mode in ("L", "P", "1", "LA"):
            gray = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        else:
            gray = to_gray(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
    return Image(np.clip(gray, 0.0, 1.0))


def write_image(path: str | Path, img: Image | np.ndarray, bits: int = 16) -> None:
    """Write a grayscale frame as PNG (or PGM, chosen by suffix)."""
    arr = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    arr = np.clip(arr, 0.0, 1.0)
    if bits == 16:
        data = np.round(arr * 65535.0).astype(np.uint16)
        pil = PILImage.fromarray(data)
    elif bits == 8:
        pil = PILImage.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L")
    else:
        raise ValueError("bits must be 8 or 16")
    pil.save(path)


def quantize16(arr: np.ndarray) -> np.ndarray:
    """Round intensities to the 16-bit grid so an in-memory frame equals its PNG round trip."""
    return np.round(np.clip(arr, 0.0, 1.0) * 65535.0) / 65535.0


def _pattern_regex(pattern: str) -> re.Pattern:
    m = re.search(r"%0?(\d*)d", pattern)
    if m is None:
        raise SequenceError(f"pattern {pattern!r} has no %d index field")
    head, tail = pattern[: m.start()], pattern[m.end():]
    return re.compile("^" + re.escape(head) + r"(\d+)" + re.escape(tail) + "$")


def load_sequence(directory: str | Path, pattern: str = "frame_%04d.png",
                  reference_index: int = 0) -> SequenceHandle:
    """Discover the frames of ``directory`` matching a printf-style ``pattern``.

    Frames are ordered by their numeric index, and every frame must decode to
    the same dimensions.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceError(f"sequence directory {directory} does not exist")
    rx = _pattern_regex(pattern)
    indexed = []
    for p in directory.iterdir():
        m = rx.match(p.name)
        if m:
            indexed.append((int(m.group(1)), p))
    indexed.sort()
    paths = tuple(p for _, p in indexed)
    if len(paths) < 2:
        raise SequenceError(f"found {len(paths)} frame(s) matching {pattern!r} in {directory}; need >= 2")
    sizes = set()
    for p in paths:
        with PILImage.open(p) as im:
            sizes.add(im.size)
    if len(sizes) != 1:
        raise SequenceError(f"inconsistent frame dimensions in {directory}: {sorted(sizes)}")
    return SequenceHandle(paths, reference_index, sizes.pop())


@numba.njit(cache=True)
def _bilinear_kernel(arr, xs, ys):
    h, w, c = arr.shape
    out = np.empty((xs.shape[0], c))
    for n in range(xs.shape[0]):
        x = min(max(xs[n], 0.0), w - 1.0)
        y = min(max(ys[n], 0.0), h - 1.0)
        x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
        y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
        fx = x - x0
        fy = y - y0
        x1 = x0 + 1 if w > 1 else 0
        y1 = y0 + 1 if h > 1 else 0
        for k in range(c):
            top = np.float64(arr[y0, x0, k]) * (1.0 - fx) + np.float64(arr[y0, x1, k]) * fx
            bottom = np.float64(arr[y1, x0, k]) * (1.0 - fx) + np.float64(arr[y1, x1, k]) * fx
            out[n, k] = top * (1.0 - fy) + bottom * fy
    return out


def sample_bilinear(img: Image | np.ndarray, x, y):
    """Bilinear intensity at continuous ``(x, y)``; coordinates are clamped to the frame.

    Accepts scalars or broadcastable arrays. Exact at integer coordinates.
    A ``(H, W, C)`` grid yields ``(..., C)`` samples.
    """
    arr = img.pixels if isinstance(img, Image) else np.asarray(img)
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    grid = arr if arr.ndim == 3 else arr[..., None]
    if grid.dtype not in (np.float32, np.float64):
        grid = grid.astype(np.float64)
    out = _bilinear_kernel(grid, np.ascontiguousarray(x).ravel(), np.ascontiguousarray(y).ravel())
    if arr.ndim == 3:
        return out.reshape(x.shape + (arr.shape[2],))
    out = out.reshape(x.shape)
    return float(out) if scalar else out


def sample_bilinear_reference(img: Image | np.ndarray, x, y):
    """Vectorized numpy form of :func:`sample_bilinear`, kept as a cross-check."""
    arr = img.pixels if isinstance(img, Image) else img
    h, w = arr.shape[:2]
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2) if w > 1 else np.zeros_like(x, dtype=np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2) if h > 1 else np.zeros_like(y, dtype=np.intp)
    x1 = x0 + 1 if w > 1 else x0
    y1 = y0 + 1 if h > 1 else y0
    fx = x - x0
    fy = y - y0
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        scalar = False
    top = arr[y0, x0] * (1.0 - fx) + arr[y0, x1] * fx
    bottom = arr[y1, x0] * (1.0 - fx) + arr[y1, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    return float(out) if scalar else out
