# src/core/topology/solver.py

"""Max-min Hamiltonian cycle (bottleneck TSP) solver for ring ordering.

Small meshes are solved exactly by enumerating distinct cycles: node 0 is
fixed first, reflections are skipped by requiring ``order[1] < order[-1]``,
and partial paths whose bottleneck cannot beat the incumbent are pruned.

Larger meshes use a threshold search: binary search over candidate edge
weights for the largest threshold whose edge subgraph still has a
Hamiltonian cycle, found by bounded backtracking. The search starts from
the greedy baseline, so the result is never worse than greedy.
"""

import logging
from dataclasses import dataclass
from itertools import permutations
from typing import List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import numpy.typing as npt

from src.core.errors import StructuralError
from src.core.topology.matrix import BandwidthMatrix, as_matrix

logger = logging.getLogger(__name__)

EXACT_LIMIT = 10
BACKTRACK_BUDGET = 200_000


@dataclass(frozen=True)
class RingOrder:
    """A ring over ``0..n-1`` and its bottleneck bandwidth ``objective``."""

    order: Tuple[int, ...]
    objective: float

    def __post_init__(self) -> None:
        if sorted(self.order) != list(range(len(self.order))):
            raise StructuralError(f"ring order {self.order} is not a permutation")

    def labels(self, node_ids: Sequence[str]) -> List[str]:
        return [node_ids[i] for i in self.order]


def ring_objective(
    matrix: Union[BandwidthMatrix, npt.ArrayLike], order: Sequence[int]
) -> float:
    """Minimum bandwidth over consecutive pairs of ``order``, wrap-around included."""
    m = as_matrix(matrix)
    n = len(order)
    return min(m.weight(order[i], order[(i + 1) % n]) for i in range(n))


def greedy_ring(values: np.ndarray) -> List[int]:
    """Nearest-neighbour tour from node 0, always taking the widest free edge."""
    n = values.shape[0]
    order = [0]
    free = set(range(1, n))
    while free:
        last = order[-1]
        nxt = max(sorted(free), key=lambda j: values[last, j])
        order.append(nxt)
        free.remove(nxt)
    return order


def _exact(values: np.ndarray) -> Tuple[List[int], float]:
    n = values.shape[0]
    best_order: List[int] = list(range(n))
    best = -1.0
    path = [0]
    used = [False] * n
    used[0] = True

    def extend(bottleneck: float) -> None:
        nonlocal best, best_order
        if len(path) == n:
            if path[1] > path[-1]:
                return
            closed = min(bottleneck, values[path[-1], 0])
            if closed > best:
                best, best_order = float(closed), list(path)
            return
        last = path[-1]
        for j in range(1, n):
            if used[j]:
                continue
            edge = min(bottleneck, values[last, j])
            if edge <= best:
                continue
            used[j] = True
            path.append(j)
            extend(edge)
            path.pop()
            used[j] = False

    extend(np.inf)
    return best_order, best


def _hamiltonian_cycle(
    values: np.ndarray, threshold: float, budget: int
) -> Optional[List[int]]:
    """A Hamiltonian cycle using only edges ``>= threshold``, or ``None``."""
    n = values.shape[0]
    graph = nx.Graph()
    graph.add_nodes_from(range(n))
    graph.add_edges_from(
        (i, j) for i in range(n) for j in range(i + 1, n) if values[i, j] >= threshold
    )
    if any(degree < 2 for _, degree in graph.degree()):
        return None
    if not nx.is_biconnected(graph):
        return None
    neighbours = {
        v: sorted(graph.neighbors(v), key=lambda u: (-values[v, u], u))
        for v in range(n)
    }
    path = [0]
    on_path = [False] * n
    on_path[0] = True
    expansions = 0

    def search() -> bool:
        nonlocal expansions
        expansions += 1
        if expansions > budget:
            return False
        last = path[-1]
        if len(path) == n:
            return graph.has_edge(last, 0)
        for nxt in neighbours[last]:
            if on_path[nxt]:
                continue
            on_path[nxt] = True
            path.append(nxt)
            if search():
                return True
            path.pop()
            on_path[nxt] = False
        return False

    return list(path) if search() else None


def _threshold_search(values: np.ndarray, budget: int) -> Tuple[List[int], float]:
    n = values.shape[0]
    best_order = greedy_ring(values)
    best = ring_objective(values, best_order)
    upper = values[np.triu_indices(n, k=1)]
    candidates = np.unique(upper[upper > best])
    lo, hi = 0, len(candidates) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        cycle = _hamiltonian_cycle(values, float(candidates[mid]), budget)
        if cycle is None:
            hi = mid - 1
        else:
            best_order, best = cycle, ring_objective(values, cycle)
            lo = mid + 1
    return best_order, best


def _canonical(order: List[int]) -> Tuple[int, ...]:
    start = order.index(0)
    rotated = order[start:] + order[:start]
    if len(rotated) > 2 and rotated[1] > rotated[-1]:
        rotated = [rotated[0]] + rotated[:0:-1]
    return tuple(rotated)


def solve_ring(
    matrix: Union[BandwidthMatrix, npt.ArrayLike],
    exact_limit: int = EXACT_LIMIT,
    budget: int = BACKTRACK_BUDGET,
) -> RingOrder:
    """Ring order maximizing the minimum edge bandwidth.

    Exact for ``n <= exact_limit``; otherwise a threshold-search heuristic
    that is never worse than :func:`greedy_ring`. Deterministic for a given
    matrix.

    Raises:
        StructuralError: If the matrix has fewer than two nodes.
    """
    m = as_matrix(matrix)
    values = m.values
    if m.n == 2:
        order, objective = [0, 1], m.weight(0, 1)
    elif m.n <= exact_limit:
        order, objective = _exact(values)
    else:
        order, objective = _threshold_search(values, budget)
    ring = RingOrder(_canonical(order), float(objective))
    recomputed = ring_objective(m, ring.order)
    if recomputed != ring.objective:
        raise RuntimeError(
            f"solver reported objective {ring.objective}, ring scores {recomputed}"
        )
    logger.debug(f"solve_ring n={m.n}: {ring.order} objective={ring.objective:.4g}")
    return ring


def brute_force_ring(matrix: Union[BandwidthMatrix, npt.ArrayLike]) -> RingOrder:
    """Exhaustive search over all permutations; oracle for small ``n``."""
    m = as_matrix(matrix)
    best_order: Tuple[int, ...] = tuple(range(m.n))
    best = ring_objective(m, best_order)
    for rest in permutations(range(1, m.n)):
        order = (0,) + rest
        score = ring_objective(m, order)
        if score > best:
            best_order, best = order, score
    return RingOrder(best_order, best)
