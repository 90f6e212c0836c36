# tests/core/topology/test_tracker.py

import pytest

from src.core.topology import TopologyTracker

NODES = ["a", "b", "c", "d"]


class TestTopologyTracker:
    """Smoothed estimates and hysteresis on ring changes."""

    def setup_method(self):
        self.tracker = TopologyTracker(floor_bps=1.0, alpha=0.5, hysteresis=0.1)
        for node in NODES:
            self.tracker.observe(node, {peer: 100.0 for peer in NODES})

    def _slow_outer_edges(self):
        self.tracker.observe("a", {"b": 50.0})
        self.tracker.observe("c", {"d": 50.0})

    def test_estimates_are_smoothed(self):
        self.tracker.observe("a", {"b": 50.0})
        assert self.tracker.matrix(NODES).between("a", "b") == pytest.approx(75.0)

    def test_unmeasured_pairs_use_floor(self):
        assert self.tracker.matrix(NODES + ["e"]).between("a", "e") == 1.0

    def test_first_proposal_is_a_change(self):
        proposal = self.tracker.propose(NODES)
        assert proposal.changed
        assert proposal.order == ("a", "b", "c", "d")
        assert proposal.objective == 100.0
        assert self.tracker.current == proposal.order

    def test_better_ring_replaces_current(self):
        self.tracker.propose(NODES)
        self._slow_outer_edges()
        proposal = self.tracker.propose(NODES)
        assert proposal.changed
        assert proposal.order == ("a", "c", "b", "d")
        assert proposal.objective == 100.0

    def test_small_gain_keeps_current(self):
        tracker = TopologyTracker(floor_bps=1.0, alpha=0.5, hysteresis=0.5)
        for node in NODES:
            tracker.observe(node, {peer: 100.0 for peer in NODES})
        first = tracker.propose(NODES)
        tracker.observe("a", {"b": 50.0})
        tracker.observe("c", {"d": 50.0})
        proposal = tracker.propose(NODES)
        assert not proposal.changed
        assert proposal.order == first.order
        assert proposal.objective == pytest.approx(75.0)

    def test_membership_change_resolves(self):
        self.tracker.propose(NODES)
        proposal = self.tracker.propose(["a", "b", "c"])
        assert proposal.changed
        assert sorted(proposal.order) == ["a", "b", "c"]

    def test_single_member(self):
        proposal = self.tracker.propose(["a"])
        assert proposal.order == ("a",)
        assert proposal.changed
        assert not self.tracker.propose(["a"]).changed

    def test_forget_drops_estimates(self):
        self.tracker.forget("a")
        assert self.tracker.matrix(NODES).between("a", "b") == 1.0
        assert self.tracker.matrix(NODES).between("b", "c") == 100.0

    def test_ring_for(self):
        assert self.tracker.ring_for(NODES) == ["a", "b", "c", "d"]
