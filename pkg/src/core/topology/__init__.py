"""Bandwidth-aware ring ordering."""

from .matrix import EMA_ALPHA, BandwidthMatrix, ema
from .solver import (
    EXACT_LIMIT,
    RingOrder,
    brute_force_ring,
    greedy_ring,
    ring_objective,
    solve_ring,
)
from .tracker import RingProposal, TopologyTracker

__all__ = [
    "EMA_ALPHA",
    "EXACT_LIMIT",
    "BandwidthMatrix",
    "RingOrder",
    "RingProposal",
    "TopologyTracker",
    "brute_force_ring",
    "ema",
    "greedy_ring",
    "ring_objective",
    "solve_ring",
]
