# tests/patterns/collectives/test_retry.py

import asyncio

import numpy as np
import pytest

from src.core.errors import FatalTrainingError
from src.core.transport import LinkSpec, PeerAddr, SimNetwork, run_simulation
from src.patterns.collectives import (
    CollectiveOptions,
    ReduceJob,
    RetryOutcome,
    RingPlan,
    allreduce_with_retry,
    reference_ring_mean,
)
from tests.patterns.collectives.conftest import FakeMembership, RingRig

OPTIONS = CollectiveOptions(op_timeout=5.0, abort_linger=1.0)


def _run(inputs, crash=(), crash_at=0.01, honour_reports=True, **retry):
    network = SimNetwork(default=LinkSpec(bandwidth_bps=1e6))
    numel = inputs[0].size

    async def main():
        rig = RingRig(network, len(inputs))
        mesh = FakeMembership(rig.addresses, honour_reports=honour_reports)
        plan = rig.plan(numel)
        data = {t.node_id: x for t, x in zip(rig.transports, inputs)}
        rig.launch(
            lambda t: allreduce_with_retry(
                t, ReduceJob(0, data[t.node_id], "fp32", plan), mesh, OPTIONS, **retry
            )
        )
        loop = asyncio.get_running_loop()
        for node in crash:
            loop.call_at(crash_at, rig.crash, node)
        return await rig.outcomes(), mesh

    return run_simulation(main())


class TestAllreduceWithRetry:
    """Collectives that survive peers failing mid-flight."""

    def test_no_failure_needs_one_attempt(self, ring_inputs):
        inputs = ring_inputs(3, 999)
        outcomes, mesh = _run(inputs)
        for outcome in outcomes.values():
            assert isinstance(outcome, RetryOutcome)
            assert outcome.attempts == 1
            assert outcome.world_size == 3
            np.testing.assert_array_equal(outcome.result, reference_ring_mean(inputs))
        assert mesh.reports == []

    def test_restarts_over_survivors(self, ring_inputs):
        inputs = ring_inputs(4, 4096)
        outcomes, mesh = _run(inputs, crash=["n2"])
        expected = reference_ring_mean([inputs[0], inputs[1], inputs[3]])
        assert set(outcomes) == {"n0", "n1", "n3"}
        for outcome in outcomes.values():
            assert outcome.attempts == 2
            assert outcome.plan.node_ids == ["n0", "n1", "n3"]
            assert outcome.plan.epoch == 1
            np.testing.assert_array_equal(outcome.result, expected)
        seen = {node for o in outcomes.values() for node in o.failures}
        assert seen == {"n2"}
        assert {node for node, _ in mesh.reports} == {"n2"}

    def test_two_simultaneous_crashes(self, ring_inputs):
        inputs = ring_inputs(4, 4096)
        outcomes, mesh = _run(inputs, crash=["n2", "n3"])
        expected = (inputs[0] + inputs[1]) / np.float32(2)
        assert set(outcomes) == {"n0", "n1"}
        for outcome in outcomes.values():
            assert outcome.world_size == 2
            assert 2 <= outcome.attempts <= 3
            np.testing.assert_array_equal(outcome.result, expected)
        assert {node for node, _ in mesh.reports} == {"n2", "n3"}

    def test_out_of_retries(self, ring_inputs):
        inputs = ring_inputs(3, 4096)
        outcomes, _ = _run(inputs, crash=["n2"], max_retries=0)
        for outcome in outcomes.values():
            assert isinstance(outcome, FatalTrainingError)
            assert "after 1 attempts" in str(outcome)

    def test_membership_never_changes(self, ring_inputs):
        inputs = ring_inputs(3, 4096)
        outcomes, _ = _run(
            inputs, crash=["n2"], honour_reports=False, epoch_timeout=5.0
        )
        for outcome in outcomes.values():
            assert isinstance(outcome, FatalTrainingError)
            assert "no membership change" in str(outcome)

    def test_non_member_is_fatal(self):
        network = SimNetwork()

        async def main():
            transport = network.attach("x")
            plan = RingPlan(0, (PeerAddr("a"), PeerAddr("b")), 2)
            mesh = FakeMembership(plan.order)
            with pytest.raises(FatalTrainingError, match="not a member"):
                await allreduce_with_retry(
                    transport, ReduceJob(0, np.zeros(2), "fp32", plan), mesh
                )

        run_simulation(main())
