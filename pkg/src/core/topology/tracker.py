# src/core/topology/tracker.py

"""Bandwidth tracking and hysteresis-gated ring re-ordering."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from src.core.topology.matrix import EMA_ALPHA, BandwidthMatrix, ema
from src.core.topology.solver import ring_objective, solve_ring

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RingProposal:
    order: Tuple[str, ...]
    objective: float
    changed: bool


class TopologyTracker:
    """Smoothed bandwidth estimates and the ring order built from them.

    Each directed measurement is EMA-smoothed. A re-solved order replaces the
    current one only when its bottleneck beats the current order's by more
    than ``hysteresis`` (relative), unless membership changed.

    Args:
        floor_bps: Bandwidth assumed for pairs never measured or whose probe
            failed.
        alpha: EMA weight of a new measurement.
        hysteresis: Relative improvement needed to publish a new order.
    """

    def __init__(
        self,
        floor_bps: float = 1e6,
        alpha: float = EMA_ALPHA,
        hysteresis: float = 0.1,
    ):
        self.floor_bps = floor_bps
        self.alpha = alpha
        self.hysteresis = hysteresis
        self._estimates: Dict[Tuple[str, str], float] = {}
        self._current: Optional[Tuple[str, ...]] = None

    @property
    def current(self) -> Optional[Tuple[str, ...]]:
        return self._current

    def observe(self, source: str, row: Mapping[str, float]) -> None:
        """Fold one node's probe results (peer id -> bits/s) into the estimates."""
        for peer in sorted(row):
            if peer == source:
                continue
            key = (source, peer)
            self._estimates[key] = ema(self._estimates.get(key), row[peer], self.alpha)

    def forget(self, node_id: str) -> None:
        for key in [k for k in self._estimates if node_id in k]:
            del self._estimates[key]

    def matrix(self, member_ids: Sequence[str]) -> BandwidthMatrix:
        rows: Dict[str, Dict[str, float]] = {}
        for (src, dst), value in self._estimates.items():
            rows.setdefault(src, {})[dst] = value
        return BandwidthMatrix.from_rows(list(member_ids), rows, self.floor_bps)

    def propose(self, member_ids: Sequence[str]) -> RingProposal:
        """Ring order over ``member_ids`` to use from the next outer step."""
        members = list(member_ids)
        if len(members) < 2:
            order = tuple(members)
            changed = order != self._current
            self._current = order
            return RingProposal(order, 0.0, changed)
        matrix = self.matrix(members)
        solved = solve_ring(matrix)
        candidate = tuple(solved.labels(members))
        current = self._current
        if current is not None and sorted(current) == sorted(members):
            index = {node: i for i, node in enumerate(members)}
            kept = ring_objective(matrix, [index[node] for node in current])
            if solved.objective <= kept * (1.0 + self.hysteresis):
                return RingProposal(current, kept, False)
            logger.info(
                f"ring order improves bottleneck {kept:.4g} -> "
                f"{solved.objective:.4g} b/s"
            )
        self._current = candidate
        return RingProposal(candidate, solved.objective, candidate != current)

    def ring_for(self, member_ids: Sequence[str]) -> List[str]:
        return list(self.propose(member_ids).order)
