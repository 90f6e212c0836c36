# tests/patterns/elastic/conftest.py

import asyncio
from typing import Dict, List, Optional

import numpy as np
import pytest

from src.core.numerics import (
    AdamWState,
    ModelParams,
    NesterovState,
    ToyModelSpec,
    init_toy_params,
)
from src.core.transport import PeerAddr, SimNetwork
from src.patterns.elastic import Checkpoint, Coordinator, MeshClient, MeshSettings

COORDINATOR = PeerAddr("coordinator")
CONFIG_HASH = "c0ffee" * 8


class MeshRig:
    """A coordinator plus any number of clients on one simulated network."""

    def __init__(self, settings: Optional[MeshSettings] = None):
        self.network = SimNetwork()
        self.settings = settings or MeshSettings()
        self.coordinator: Optional[Coordinator] = None
        self.clients: Dict[str, MeshClient] = {}

    async def start(self) -> Coordinator:
        transport = self.network.attach(COORDINATOR.node_id)
        await transport.start()
        self.coordinator = Coordinator(transport, self.settings)
        await self.coordinator.start()
        return self.coordinator

    def client(self, node_id: str) -> MeshClient:
        client = MeshClient(self.network.attach(node_id), COORDINATOR, self.settings)
        self.clients[node_id] = client
        return client

    async def founders(self, *node_ids: str) -> List[MeshClient]:
        """Register founders and pass barrier 0 together."""
        clients = [self.client(node) for node in node_ids]
        for client in clients:
            await client.register(CONFIG_HASH)
        await asyncio.gather(*(client.barrier(0) for client in clients))
        return clients


def make_checkpoint(step: int = 3, seed: int = 1, shard: int = 0) -> Checkpoint:
    params = init_toy_params(ToyModelSpec(d_in=3, d_hidden=4, d_out=2), seed)
    moved = params.map(lambda _, arr: arr + np.float32(0.5))
    adam = AdamWState(step=12, m=params.zeros_like(), v=moved)
    return Checkpoint(
        outer_step=step,
        params=params,
        retained=moved,
        adam=adam,
        nesterov=NesterovState(buffer=ModelParams(params.items())),
        data_position=42,
        shard_id=shard,
        config_hash=CONFIG_HASH,
    )


@pytest.fixture
def checkpoint() -> Checkpoint:
    return make_checkpoint()
