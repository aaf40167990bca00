"""Pairwise flow, chain composition and the photometric error score."""

from .batch import estimate_sequence_flows
from .chain import FlowChainCache, MissingFlowError, chain_flow, compose_flow
from .error import ErrorWeights, correspondence_scores, error_score, error_scores
from .field import FlowField
from .flo import read_flo, write_flo
from .solver import SolverParams, SolverTrace, estimate_flow

__all__ = [
    "ErrorWeights",
    "FlowChainCache",
    "FlowField",
    "MissingFlowError",
    "SolverParams",
    "SolverTrace",
    "chain_flow",
    "compose_flow",
    "correspondence_scores",
    "error_score",
    "error_scores",
    "estimate_flow",
    "estimate_sequence_flows",
    "read_flo",
    "write_flo",
]
