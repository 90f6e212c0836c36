# src/patterns/elastic/membership.py

"""Worker-side client of the coordinator.

:class:`MeshClient` registers, waits at barriers, sends heartbeats and
deathrattles, and answers the collective retry loop (ring plans, failure
reports, commit checks) from the last mesh state it saw.
"""

import asyncio
import json
import logging
from typing import Dict, List, Optional

from src.core.errors import FatalTrainingError, LinkError, MeshError
from src.core.transport import (
    Frame,
    FrameKind,
    Link,
    PeerAddr,
    Transport,
    pack_message,
    probe_peers,
)
from src.patterns.collectives import RingPlan
from src.patterns.elastic.coordinator import (
    HEARTBEAT_CHANNEL,
    STATE_KEY,
    bandwidth_key,
    join_key,
)
from src.patterns.elastic.kvstore import KVClient
from src.patterns.elastic.mesh_state import (
    Heartbeat,
    JoinAssignment,
    JoinMode,
    MeshState,
    Registration,
)
from src.patterns.elastic.settings import MeshSettings

logger = logging.getLogger(__name__)


def _parse_state(raw: Optional[bytes]) -> Optional[MeshState]:
    if raw is None:
        return None
    return MeshState.model_validate_json(raw)


class MeshClient:
    """A worker's view of the mesh.

    Wraps the coordinator's ops, keeps a heartbeat stream alive, and
    satisfies :class:`~src.patterns.collectives.RingMembership` so the ring
    collective can retry over survivors.

    Args:
        transport: This worker's endpoint.
        coordinator: Address of the coordinator.
        settings: Must match the coordinator's heartbeat timing.
    """

    def __init__(
        self,
        transport: Transport,
        coordinator: PeerAddr,
        settings: Optional[MeshSettings] = None,
    ):
        self.transport = transport
        self.coordinator = coordinator
        self.settings = settings or MeshSettings()
        self.kv = KVClient(transport, coordinator, self.settings.op_timeout)
        self.state: Optional[MeshState] = None
        self.outer_step = 0
        self._heartbeats: Optional["asyncio.Task[None]"] = None
        self._hb_link: Optional[Link] = None

    @property
    def node_id(self) -> str:
        return self.transport.node_id

    def _remember(self, state: MeshState) -> MeshState:
        self.state = state
        if state.halted:
            raise FatalTrainingError(f"mesh halted: {state.halt_reason}")
        return state

    # -- registration ---------------------------------------------------------

    async def register(self, config_hash: str, join_mode: JoinMode = "founder") -> str:
        """Announce this node; returns the join mode the coordinator chose.

        Raises:
            JoinRefused: Config hash mismatch or duplicate node id.
        """
        addr = self.transport.address
        registration = Registration(
            node_id=self.node_id,
            host=addr.host,
            port=addr.port,
            config_hash=config_hash,
            join_mode=join_mode,
        )
        reply, _ = await self.kv.call("register", **registration.model_dump())
        mode = str(reply.result["join_mode"])
        logger.info(f"{self.node_id}: registered as {mode}")
        return mode

    async def wait_for_assignment(
        self, timeout: Optional[float] = None
    ) -> JoinAssignment:
        """Block until the coordinator admits this node."""
        raw = await self.kv.kv_wait(
            join_key(self.node_id), lambda value: value is not None, timeout
        )
        assert raw is not None
        return JoinAssignment.model_validate_json(raw)

    async def join_done(self) -> MeshState:
        _, body = await self.kv.call("join_done")
        return self._remember(MeshState.model_validate_json(body))

    async def barrier(self, step: int, timeout: Optional[float] = None) -> MeshState:
        """Wait at the start of outer step ``step`` until the coordinator commits.

        Raises:
            FatalTrainingError: The mesh halted or this node was evicted.
        """
        self.outer_step = step
        _, body = await self.kv.call("barrier", timeout=timeout, wait=True, step=step)
        return self._remember(MeshState.model_validate_json(body))

    async def leave_gracefully(self) -> None:
        await self.kv.call("leave")
        logger.info(f"{self.node_id}: left the mesh")

    # -- ring membership ------------------------------------------------------

    async def fetch_state(self) -> MeshState:
        raw, _ = await self.kv.kv_get(STATE_KEY)
        state = _parse_state(raw)
        if state is None:
            raise FatalTrainingError("coordinator has not published a mesh state")
        return self._remember(state)

    async def ring_plan(self, numel: int) -> RingPlan:
        return (await self.fetch_state()).ring_plan(numel)

    async def report_failure(self, node_id: str, epoch: int) -> None:
        reply, _ = await self.kv.call("report", failed=node_id, epoch=epoch)
        logger.info(
            f"{self.node_id}: reported '{node_id}' at epoch {epoch}, "
            f"evicted={reply.result.get('evicted')}"
        )

    async def wait_for_epoch_change(
        self, epoch: int, timeout: Optional[float] = None
    ) -> int:
        def newer(raw: Optional[bytes]) -> bool:
            state = _parse_state(raw)
            return state is not None and (state.epoch > epoch or state.halted)

        raw = await self.kv.kv_wait(STATE_KEY, newer, timeout)
        state = _parse_state(raw)
        assert state is not None
        return self._remember(state).epoch

    async def commit_collective(self, job_id: int, epoch: int) -> bool:
        reply, _ = await self.kv.call(
            "ar_done", wait=True, job_id=job_id, epoch=epoch
        )
        return bool(reply.result["committed"])

    # -- heartbeats -----------------------------------------------------------

    def start_heartbeats(self) -> None:
        if self._heartbeats is None or self._heartbeats.done():
            self._heartbeats = asyncio.ensure_future(self._heartbeat_loop())

    async def stop_heartbeats(self) -> None:
        if self._heartbeats is not None:
            self._heartbeats.cancel()
            await asyncio.gather(self._heartbeats, return_exceptions=True)
            self._heartbeats = None
        if self._hb_link is not None:
            await self._hb_link.close()
            self._hb_link = None

    async def _send_beat(self, kind: FrameKind, reason: str = "") -> None:
        if self._hb_link is None:
            self._hb_link = await self.transport.connect(
                self.coordinator, HEARTBEAT_CHANNEL, self.settings.op_timeout
            )
        beat = Heartbeat(
            node_id=self.node_id, outer_step=self.outer_step, reason=reason
        )
        await self._hb_link.send(Frame(kind, pack_message(beat)))

    async def _heartbeat_loop(self) -> None:
        while True:
            try:
                await self._send_beat(FrameKind.HEARTBEAT)
            except LinkError as exc:
                logger.warning(f"{self.node_id}: heartbeat failed: {exc}")
                if self._hb_link is not None:
                    await self._hb_link.close()
                    self._hb_link = None
            await asyncio.sleep(self.settings.heartbeat_interval)

    async def send_deathrattle(self, reason: str) -> None:
        """Best-effort notice that this node is going down."""
        try:
            await self._send_beat(FrameKind.DEATHRATTLE, reason)
        except MeshError as exc:
            logger.warning(f"{self.node_id}: deathrattle not delivered: {exc}")

    # -- topology -------------------------------------------------------------

    async def publish_bandwidth(self, row: Dict[str, float]) -> None:
        await self.kv.kv_set(
            bandwidth_key(self.node_id), json.dumps(row, sort_keys=True).encode()
        )

    async def refresh_topology(
        self, peers: Optional[List[PeerAddr]] = None, timeout: Optional[float] = 30.0
    ) -> Dict[str, float]:
        """Probe every other member and publish the measured row."""
        if peers is None:
            state = self.state or await self.fetch_state()
            peers = list(state.addresses().values())
        row = await probe_peers(
            self.transport, peers, self.settings.floor_bps, timeout=timeout
        )
        if row:
            await self.publish_bandwidth(row)
        return row

    async def close(self) -> None:
        await self.stop_heartbeats()
        await self.kv.close()
