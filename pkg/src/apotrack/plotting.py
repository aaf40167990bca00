"""Figures written to image files: mesh overlays, score curves and error curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

OVERLAY_NAME = "overlay_{:04d}.png"


def render_overlay(path: str | Path, frame: np.ndarray, mesh, gt: np.ndarray | None = None,
                   title: str = "") -> None:
    """Mesh wireframe on a grayscale frame, optional ground-truth points in red."""
    h, w = frame.shape
    fig = plt.figure(figsize=(w / 100, h / 100), dpi=100)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(frame, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    segs = mesh.vertices[mesh.edges]
    ax.add_collection(LineCollection(segs, colors="yellow", linewidths=0.6))
    if gt is not None:
        ax.plot(gt[:, 0], gt[:, 1], "r.", markersize=2)
    if title:
        ax.text(4, 12, title, color="white", fontsize=7)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.axis("off")
    fig.savefig(path)
    plt.close(fig)


def plot_scores(path: str | Path, scores, anchors=(), threshold: float | None = None) -> None:
    """General error per frame with anchors marked."""
    frames = np.array([s.frame for s in scores])
    vals = np.array([s.general_error for s in scores], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 3))
    finite = np.isfinite(vals)
    ax.plot(frames[finite], vals[finite], "-", color="0.3", lw=1)
    anchors = [a for a in anchors if np.isfinite(vals[frames == a]).all()]
    if anchors:
        ax.plot(anchors, [vals[frames == a][0] for a in anchors], "o", color="tab:red", label="anchor")
        ax.legend(loc="upper right")
    if threshold is not None and np.isfinite(threshold):
        ax.axhline(threshold, color="tab:blue", lw=0.8, ls="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("general error")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_curves(path: str | Path, reports) -> None:
    """Mean endpoint error per frame, one line per report."""
    fig, ax = plt.subplots(figsize=(7, 3))
    for r in reports:
        ax.plot(r.frames, r.mean_ee, lw=1, label=f"{r.method or 'run'} (AEE {r.aee:.2f})")
    ax.set_xlabel("frame")
    ax.set_ylabel("mean EE [px]")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
