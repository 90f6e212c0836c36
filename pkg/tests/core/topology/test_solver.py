# tests/core/topology/test_solver.py

import numpy as np
import pytest

from src.core.errors import StructuralError
from src.core.topology import (
    BandwidthMatrix,
    RingOrder,
    brute_force_ring,
    greedy_ring,
    ring_objective,
    solve_ring,
)


def _random_matrix(n: int, seed: int) -> np.ndarray:
    gen = np.random.default_rng(seed)
    values = gen.uniform(1.0, 100.0, size=(n, n)).round(1)
    return np.minimum(values, values.T)


class TestRingObjective:
    """Bottleneck of a ring."""

    def test_includes_wrap_around(self):
        values = [[0, 5, 1], [5, 0, 7], [1, 7, 0]]
        assert ring_objective(values, [0, 1, 2]) == 1

    def test_order_must_be_permutation(self):
        with pytest.raises(StructuralError, match="permutation"):
            RingOrder((0, 0, 1), 1.0)


class TestSolveRing:
    """Exact and heuristic max-min ring orders."""

    def test_bundled_four_node_table(self, scenarios_dir):
        m = BandwidthMatrix.from_text((scenarios_dir / "ring4.txt").read_text())
        ring = solve_ring(m)
        assert ring.order == (0, 1, 2, 3)
        assert ring.objective == 10

    def test_two_nodes(self):
        ring = solve_ring([[0, 4], [4, 0]])
        assert (ring.order, ring.objective) == ((0, 1), 4)

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_matches_brute_force(self, seed):
        values = _random_matrix(7, seed)
        assert solve_ring(values).objective == brute_force_ring(values).objective

    @pytest.mark.slow
    @pytest.mark.parametrize("n", [4, 5, 6, 7, 8])
    def test_exact_matches_brute_force_on_many_meshes(self, n):
        for seed in range(100):
            values = _random_matrix(n, 1000 * n + seed)
            expected = brute_force_ring(values).objective
            assert solve_ring(values).objective == expected, f"seed {seed}"

    @pytest.mark.parametrize("seed", range(3))
    def test_threshold_search_matches_brute_force(self, seed):
        values = _random_matrix(7, 100 + seed)
        heuristic = solve_ring(values, exact_limit=3)
        assert heuristic.objective == brute_force_ring(values).objective

    def test_canonical_form(self):
        ring = solve_ring(_random_matrix(6, 42))
        assert ring.order[0] == 0
        assert ring.order[1] < ring.order[-1]

    def test_deterministic(self):
        values = _random_matrix(12, 7)
        assert solve_ring(values) == solve_ring(values)

    def test_large_mesh_not_worse_than_greedy(self):
        values = _random_matrix(14, 3)
        ring = solve_ring(values)
        assert ring.objective >= ring_objective(values, greedy_ring(values))
        assert ring.objective == ring_objective(values, ring.order)

    def test_finds_planted_ring(self):
        n = 12
        perm = np.random.default_rng(5).permutation(n)
        values = np.full((n, n), 1.0)
        for i in range(n):
            a, b = perm[i], perm[(i + 1) % n]
            values[a, b] = values[b, a] = 1000.0
        assert solve_ring(values).objective == 1000.0

    def test_objective_equals_recomputed(self):
        m = BandwidthMatrix(_random_matrix(5, 11))
        ring = solve_ring(m)
        assert ring_objective(m, ring.order) == ring.objective


class TestSolverProperties:
    """Invariances of the optimum."""

    @pytest.mark.parametrize("seed", range(20))
    def test_raising_an_edge_never_lowers_the_optimum(self, seed):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(4, 9))
        values = _random_matrix(n, seed)
        before = solve_ring(values).objective
        i, j = gen.choice(n, size=2, replace=False)
        raised = values.copy()
        raised[i, j] = raised[j, i] = values[i, j] + gen.uniform(1.0, 200.0)
        assert solve_ring(raised).objective >= before

    @pytest.mark.parametrize("seed", range(20))
    def test_relabeling_nodes_keeps_the_optimum(self, seed):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(4, 9))
        m = BandwidthMatrix(_random_matrix(n, 500 + seed))
        perm = gen.permutation(n)
        ring = solve_ring(m)
        relabeled = solve_ring(m.relabeled(perm))
        assert relabeled.objective == ring.objective
        # the relabeled ring, mapped back, is just as good on the original
        mapped = [int(perm[i]) for i in relabeled.order]
        assert ring_objective(m, mapped) == ring.objective
