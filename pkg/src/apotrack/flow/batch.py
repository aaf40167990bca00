"""Pairwise flow estimation over a whole sequence."""

from __future__ import annotations

from functools import partial

from ..parallel import ordered_map
from .chain import FlowChainCache
from .solver import SolverParams, estimate_flow


def _pair(params: SolverParams, pair):
    a, b = pair
    return estimate_flow(a, b, params)


def estimate_sequence_flows(frames, params: SolverParams | None = None, workers: int = 1,
                            max_entries: int = 64) -> FlowChainCache:
    """Forward ``i -> i+1`` and backward ``i+1 -> i`` fields for every neighbouring pair."""
    params = params or SolverParams()
    n = len(frames)
    jobs = [(frames[i], frames[i + 1]) for i in range(n - 1)]
    jobs += [(frames[i + 1], frames[i]) for i in range(n - 1)]
    out = ordered_map(partial(_pair, params), jobs, workers)
    fwd = {i: out[i] for i in range(n - 1)}
    bwd = {i: out[n - 1 + i] for i in range(n - 1)}
    return FlowChainCache(fwd, bwd, max_entries=max_entries)
