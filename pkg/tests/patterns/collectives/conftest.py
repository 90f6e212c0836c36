# tests/patterns/collectives/conftest.py

import asyncio
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pytest

from src.core.transport import PeerAddr, SimNetwork, SimTransport
from src.patterns.collectives import (
    CollectiveOptions,
    ReduceJob,
    RingPlan,
    allreduce,
)


class FakeMembership:
    """In-memory stand-in for the coordinator's view of one ring.

    A reported failure removes the node and bumps the epoch at once; a
    collective commits if the epoch it ran in is still current.
    """

    def __init__(self, members: Sequence[PeerAddr], honour_reports: bool = True):
        self.members: List[PeerAddr] = list(members)
        self.epoch = 0
        self.honour_reports = honour_reports
        self.reports: List[Tuple[str, int]] = []
        self._changed: Optional[asyncio.Event] = None

    def _event(self) -> asyncio.Event:
        if self._changed is None:
            self._changed = asyncio.Event()
        return self._changed

    async def ring_plan(self, numel: int) -> RingPlan:
        return RingPlan(self.epoch, tuple(self.members), numel)

    async def report_failure(self, node_id: str, epoch: int) -> None:
        self.reports.append((node_id, epoch))
        if not self.honour_reports:
            return
        if node_id in [m.node_id for m in self.members]:
            self.members = [m for m in self.members if m.node_id != node_id]
            self.epoch += 1
            self._event().set()
            self._changed = asyncio.Event()

    async def wait_for_epoch_change(
        self, epoch: int, timeout: Optional[float] = None
    ) -> int:
        while self.epoch <= epoch:
            await self._event().wait()
        return self.epoch

    async def commit_collective(self, job_id: int, epoch: int) -> bool:
        return self.epoch == epoch


class RingRig:
    """``k`` simulated nodes wired for one collective."""

    def __init__(self, network: SimNetwork, k: int):
        self.network = network
        self.transports: List[SimTransport] = [
            network.attach(f"n{i}") for i in range(k)
        ]
        self.tasks: Dict[str, "asyncio.Task"] = {}

    @property
    def addresses(self) -> Tuple[PeerAddr, ...]:
        return tuple(t.address for t in self.transports)

    def plan(self, numel: int, epoch: int = 0) -> RingPlan:
        return RingPlan(epoch, self.addresses, numel)

    def launch(self, make: Callable[[SimTransport], "asyncio.Future"]) -> None:
        for transport in self.transports:
            self.tasks[transport.node_id] = asyncio.ensure_future(make(transport))

    def crash(self, node_id: str) -> None:
        self.network.crash(node_id)
        self.tasks[node_id].cancel()

    async def outcomes(self) -> Dict[str, object]:
        await asyncio.gather(*self.tasks.values(), return_exceptions=True)
        results: Dict[str, object] = {}
        for node, task in self.tasks.items():
            if task.cancelled():
                continue
            results[node] = task.exception() or task.result()
        return results


async def ring_allreduce(
    network: SimNetwork,
    inputs: Sequence[np.ndarray],
    mode: str = "fp32",
    options: Optional[CollectiveOptions] = None,
) -> Tuple[List[np.ndarray], List[SimTransport], float]:
    """Run one collective over fresh nodes; returns results, nodes, makespan."""
    rig = RingRig(network, len(inputs))
    plan = rig.plan(inputs[0].size)
    loop = asyncio.get_running_loop()
    start = loop.time()
    results = await asyncio.gather(
        *(
            allreduce(transport, ReduceJob(0, x, mode, plan), options)
            for transport, x in zip(rig.transports, inputs)
        )
    )
    return list(results), rig.transports, loop.time() - start


@pytest.fixture
def ring_inputs() -> Callable[[int, int], List[np.ndarray]]:
    """Factory for ``k`` standard-normal fp32 vectors of ``n`` elements."""

    def make(k: int, n: int, seed: int = 0) -> List[np.ndarray]:
        gen = np.random.default_rng(seed)
        return [gen.standard_normal(n).astype(np.float32) for _ in range(k)]

    return make
