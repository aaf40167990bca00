"""Flow composition and long-range chains over a sequence.

A chain from frame ``i`` to ``j`` is built by warped composition of the
pairwise fields in between, ``w_ac(x) = w_ab(x) + w_bc(x + w_ab(x))``. For
spatially constant fields this reduces to the plain sum of displacements.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .field import FlowField, check_same_shape
from .flo import read_flo, write_flo

FORWARD_NAME = "flow_f_{:04d}.flo"
BACKWARD_NAME = "flow_b_{:04d}.flo"


def compose_flow(w_ab: FlowField, w_bc: FlowField) -> FlowField:
    """Per pixel: ``w_ab(x) + w_bc(x + w_ab(x))``, ``w_bc`` sampled bilinearly with clamping."""
    check_same_shape(w_ab, w_bc)
    h, w = w_ab.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    first = w_ab.vectors.astype(np.float64)
    second = w_bc.at(gx + first[..., 0], gy + first[..., 1])
    return FlowField(first + second)


class MissingFlowError(KeyError):
    pass


class FlowChainCache:
    """Pairwise forward/backward fields plus memoized chains keyed by ``(from, to)``.

    ``forward[i]`` maps frame ``i`` to ``i + 1`` and ``backward[i]`` maps frame
    ``i + 1`` back to ``i``. Chains are folded left to right and stored in a
    bounded LRU so long sequences do not hold every pair in memory. Reads are
    safe from several threads; memo writes are serialized.
    """

    def __init__(self, forward: dict[int, FlowField] | None = None,
                 backward: dict[int, FlowField] | None = None, max_entries: int = 256):
        self.forward: dict[int, FlowField] = dict(forward or {})
        self.backward: dict[int, FlowField] = dict(backward or {})
        self.max_entries = max_entries
        self._memo: OrderedDict[tuple[int, int], FlowField] = OrderedDict()
        self._lock = threading.Lock()

    @property
    def frame_count(self) -> int:
        return len(self.forward) + 1

    def pairwise(self, src: int, dst: int) -> FlowField:
        if dst == src + 1:
            table, key = self.forward, src
        elif dst == src - 1:
            table, key = self.backward, dst
        else:
            raise ValueError(f"frames {src} and {dst} are not adjacent")
        try:
            return table[key]
        except KeyError:
            direction = "forward" if dst > src else "backward"
            raise MissingFlowError(f"missing {direction} flow between frames {src} and {dst}") from None

    def _lookup(self, key):
        with self._lock:
            hit = self._memo.get(key)
            if hit is not None:
                self._memo.move_to_end(key)
            return hit

    def _store(self, key, field: FlowField) -> None:
        with self._lock:
            self._memo[key] = field
            self._memo.move_to_end(key)
            while len(self._memo) > self.max_entries:
                self._memo.popitem(last=False)

    def chain(self, src: int, dst: int) -> FlowField:
        return chain_flow(self, src, dst)

    def clear_memo(self) -> None:
        with self._lock:
            self._memo.clear()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, f in sorted(self.forward.items()):
            write_flo(directory / FORWARD_NAME.format(i), f)
        for i, f in sorted(self.backward.items()):
            write_flo(directory / BACKWARD_NAME.format(i), f)

    @classmethod
    def load(cls, directory: str | Path, frame_count: int) -> "FlowChainCache":
        directory = Path(directory)
        fwd, bwd = {}, {}
        for i in range(frame_count - 1):
            fwd[i] = read_flo(directory / FORWARD_NAME.format(i))
            bwd[i] = read_flo(directory / BACKWARD_NAME.format(i))
        return cls(fwd, bwd)


def chain_flow(cache: FlowChainCache, src: int, dst: int) -> FlowField:
    """Long-range field from frame ``src`` to ``dst`` by folding pairwise fields.

    Forward fields are used when ``src < dst`` and backward fields otherwise.
    A single link returns the stored pairwise field itself.
    """
    if src == dst:
        raise ValueError("chain endpoints must differ")
    step = 1 if dst > src else -1
    if dst == src + step:
        return cache.pairwise(src, dst)
    hit = cache._lookup((src, dst))
    if hit is not None:
        return hit
    # resume from the longest memoized prefix
    mid = dst - step
    start, acc = src + step, cache.pairwise(src, src + step)
    while mid != src + step:
        prefix = cache._lookup((src, mid))
        if prefix is not None:
            start, acc = mid, prefix
            break
        mid -= step
    for k in range(start, dst, step):
        acc = compose_flow(acc, cache.pairwise(k, k + step))
        cache._store((src, k + step), acc)
    return acc
