"""Triangle meshes tracked through a sequence and their text file format.

File layout (``mesh_%04d.txt``)::

    V E F
    v x y      (V lines)
    e i j      (E lines)
    f i j k    (F lines)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 2) as (x, y)
    edges: np.ndarray  # (E, 2)
    faces: np.ndarray  # (F, 3)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        e = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        f = np.asarray(self.faces, dtype=np.intp).reshape(-1, 3)
        for name, idx in (("edge", e), ("face", f)):
            if idx.size and (idx.min() < 0 or idx.max() >= len(v)):
                raise ValueError(f"{name} index out of range for {len(v)} vertices")
        for arr in (v, e, f):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "faces", f)

    def __len__(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        """Same topology, new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValueError("vertex array shape must match the mesh")
        return TriangleMesh(vertices, self.edges, self.faces)

    def same_topology(self, other: "TriangleMesh") -> bool:
        return np.array_equal(self.edges, other.edges) and np.array_equal(self.faces, other.faces)


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.intp).reshape(-1, 3)
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def lattice_mesh(x0: float, y0: float, x1: float, y1: float, nx: int, ny: int) -> TriangleMesh:
    """Regular ``nx`` by ``ny`` vertex lattice split into two triangles per cell.

    Vertices are numbered row-major from the top-left corner.
    """
    if nx < 2 or ny < 2:
        raise ValueError("lattice needs at least 2x2 vertices")
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    faces = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            b, d, e = a + 1, a + nx, a + nx + 1
            faces.append((a, b, e))
            faces.append((a, e, d))
    faces = np.array(faces, dtype=np.intp)
    return TriangleMesh(verts, edges_from_faces(faces), faces)


def lattice_shape(count: int, aspect: float = 1.0) -> tuple[int, int]:
    """Factor ``count`` into ``(nx, ny)`` with ``nx / ny`` closest to ``aspect``."""
    best = None
    for ny in range(2, count // 2 + 1):
        if count % ny:
            continue
        nx = count // ny
        if nx < 2:
            continue
        score = abs(np.log((nx / ny) / aspect))
        if best is None or score < best[0]:
            best = (score, nx, ny)
    if best is None:
        raise ValueError(f"cannot arrange {count} points on a lattice")
    return best[1], best[2]


def write_mesh(path: str | Path, mesh: TriangleMesh) -> None:
    lines = [f"{len(mesh.vertices)} {len(mesh.edges)} {len(mesh.faces)}"]
    lines += [f"v {x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"e {i} {j}" for i, j in mesh.edges.tolist()]
    lines += [f"f {i} {j} {k}" for i, j, k in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path) -> TriangleMesh:
    text = Path(path).read_text().split("\n")
    try:
        nv, ne, nf = (int(t) for t in text[0].split())
    except (ValueError, IndexError):
        raise ValueError(f"{path}: malformed mesh header") from None
    verts, edges, faces = [], [], []
    for line in text[1:]:
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            verts.append((float(parts[1]), float(parts[2])))
        elif tag == "e":
            edges.append((int(parts[1]), int(parts[2])))
        elif tag == "f":
            faces.append((int(parts[1]), int(parts[2]), int(parts[3])))
        else:
            raise ValueError(f"{path}: unknown record {tag!r}")
    if (len(verts), len(edges), len(faces)) != (nv, ne, nf):
        raise ValueError(f"{path}: header counts do not match records")
    return TriangleMesh(np.array(verts).reshape(-1, 2), np.array(edges, dtype=np.intp).reshape(-1, 2),
                        np.array(faces, dtype=np.intp).reshape(-1, 3))
