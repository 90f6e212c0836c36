# src/patterns/elastic/join.py

"""Node-side join procedures.

Founders register before the first barrier and start from the seeded
initial parameters. Later arrivals are admitted at an outer-step barrier:

- blocking: the running members wait inside that barrier until the new
  node has copied a checkpoint, then everybody starts the step together.
- non-blocking: the running members carry on with their inner phase; the
  new node copies the checkpoint taken at the barrier, skips that step's
  inner phase and contributes a zero pseudo-gradient to its all-reduce.
"""

import logging
from dataclasses import dataclass
from typing import Optional

from src.core.errors import TransferError
from src.patterns.elastic.checkpoint import Checkpoint, fetch_checkpoint
from src.patterns.elastic.membership import MeshClient
from src.patterns.elastic.mesh_state import JoinAssignment, JoinMode, MeshState

logger = logging.getLogger(__name__)


@dataclass
class JoinResult:
    mode: str
    assignment: Optional[JoinAssignment] = None
    checkpoint: Optional[Checkpoint] = None
    state: Optional[MeshState] = None

    @property
    def founder(self) -> bool:
        return self.mode == "founder"

    @property
    def start_step(self) -> int:
        return self.assignment.start_step if self.assignment is not None else 0


async def join_mesh(
    client: MeshClient,
    config_hash: str,
    mode: JoinMode = "blocking",
    timeout: Optional[float] = None,
) -> JoinResult:
    """Register and, unless admitted as a founder, sync from a donor.

    Raises:
        JoinRefused: The coordinator rejected the registration.
        KVTimeout: No admission within ``timeout``.
        TransferError: Every donor failed to deliver a valid checkpoint.
    """
    effective = await client.register(config_hash, mode)
    if effective == "founder":
        return JoinResult(mode=effective)

    assignment = await client.wait_for_assignment(timeout)
    logger.info(
        f"{client.node_id}: admitted at step {assignment.start_step} "
        f"(epoch {assignment.epoch}, rank {assignment.rank}, {effective})"
    )
    if not assignment.donors:
        raise TransferError(f"{client.node_id}: admitted without any donor")
    checkpoint = await fetch_checkpoint(
        client.transport, assignment.donors, assignment.start_step, config_hash
    )
    state = await client.join_done()
    return JoinResult(effective, assignment, checkpoint, state)


async def join_blocking(
    client: MeshClient, config_hash: str, timeout: Optional[float] = None
) -> JoinResult:
    return await join_mesh(client, config_hash, "blocking", timeout)


async def join_nonblocking(
    client: MeshClient, config_hash: str, timeout: Optional[float] = None
) -> JoinResult:
    return await join_mesh(client, config_hash, "nonblocking", timeout)
