# src/patterns/elastic/coordinator.py

"""The mesh coordinator: one authority for membership, ranks and ring order.

Workers reach it over two channels. ``kv`` carries request/reply ops
(store access plus ``register``, ``barrier``, ``report``, ``ar_done``,
``join_done`` and ``leave``); ``hb`` carries one long-lived stream of
``HEARTBEAT`` frames per worker, and the ``DEATHRATTLE`` a dying worker
sends on its way out.

Membership changes in two ways:

- Joins and graceful leaves are committed at an outer-step barrier. When
  every member that was already running and has not announced a leave has
  arrived at ``barrier(t)``, pending registrations are admitted, leavers are
  dropped, ranks are recomputed and the epoch bumps.
- Evictions (heartbeat silence, a deathrattle, a failure report for the
  current epoch) commit immediately.

Every committed state is published under ``mesh/state``.
"""

import asyncio
import json
import logging
from typing import Callable, Dict, List, Optional, Set, Tuple

from src.core.errors import FatalTrainingError, JoinRefused, KVTimeout, MeshError
from src.core.topology import TopologyTracker
from src.core.transport import FrameKind, Link, Transport, unpack_message
from src.patterns.elastic.kvstore import KeyValueStore, KVReply, KVRequest, KVServer
from src.patterns.elastic.mesh_state import (
    Heartbeat,
    JoinAssignment,
    MemberInfo,
    MeshState,
    Registration,
)
from src.patterns.elastic.settings import MeshSettings

logger = logging.getLogger(__name__)

STATE_KEY = "mesh/state"
HEARTBEAT_CHANNEL = "hb"

CommitHook = Callable[[int, MeshState], None]


def join_key(node_id: str) -> str:
    return f"join/{node_id}"


def bandwidth_key(node_id: str) -> str:
    return f"bw/{node_id}"


class Coordinator:
    """Serves the store and owns :class:`MeshState`.

    Args:
        transport: The coordinator's own endpoint.
        settings: Heartbeat, bootstrap and halt policy.
        config_hash: Hash every registrant must present; when omitted the
            first registrant's hash becomes the reference.
        tracker: Bandwidth tracker used to order the ring.
    """

    def __init__(
        self,
        transport: Transport,
        settings: Optional[MeshSettings] = None,
        config_hash: Optional[str] = None,
        tracker: Optional[TopologyTracker] = None,
    ):
        self.transport = transport
        self.settings = settings or MeshSettings()
        self.config_hash = config_hash
        self.tracker = tracker or TopologyTracker(
            floor_bps=self.settings.floor_bps, hysteresis=self.settings.hysteresis
        )
        self.store = KeyValueStore()
        self.server = KVServer(transport, self.store)
        self.server.register("register", self._on_register)
        self.server.register("barrier", self._on_barrier)
        self.server.register("report", self._on_report)
        self.server.register("ar_done", self._on_collective_done)
        self.server.register("join_done", self._on_join_done)
        self.server.register("leave", self._on_leave)

        self.state = MeshState()
        self.evictions: List[Tuple[float, str, str]] = []
        self._pending: Dict[str, Registration] = {}
        self._leaving: Set[str] = set()
        self._last_seen: Dict[str, float] = {}
        self._arrived: Dict[int, Set[str]] = {}
        self._committed: Dict[int, int] = {}
        self._done: Dict[Tuple[int, int], Set[str]] = {}
        self._collectives: Dict[int, int] = {}
        self._round_size = 0
        self._round_losses = 0
        self._next_shard = 0
        self._bandwidth_seen: Dict[str, int] = {}
        self._hooks: List[CommitHook] = []
        self._tasks: List["asyncio.Task[None]"] = []

    # -- lifecycle -----------------------------------------------------------

    async def start(self) -> None:
        self._publish()
        self._tasks = [
            asyncio.ensure_future(self.server.serve()),
            asyncio.ensure_future(self._accept_heartbeats()),
            asyncio.ensure_future(self._detect_loop()),
        ]
        logger.info(f"coordinator '{self.transport.node_id}' serving")

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks = []

    async def serve(self) -> None:
        """Run until cancelled."""
        await self.start()
        try:
            await asyncio.gather(*self._tasks)
        finally:
            await self.stop()

    def on_commit(self, hook: CommitHook) -> None:
        """Call ``hook(step, state)`` after every committed barrier."""
        self._hooks.append(hook)

    # -- queries -------------------------------------------------------------

    @property
    def pending(self) -> List[str]:
        return sorted(self._pending)

    @property
    def leaving(self) -> List[str]:
        return sorted(self._leaving)

    def committed_epoch(self, step: int) -> Optional[int]:
        return self._committed.get(step)

    def _now(self) -> float:
        return self.transport.now()

    def _publish(self) -> None:
        self.store.set(STATE_KEY, self.state.model_dump_json().encode("utf-8"))

    def _state_reply(self) -> Tuple[KVReply, bytes]:
        reply = KVReply(found=True, version=self.state.epoch)
        return reply, self.state.model_dump_json().encode("utf-8")

    def _check_running(self) -> None:
        if self.state.halted:
            raise FatalTrainingError(f"mesh halted: {self.state.halt_reason}")

    # -- registration and barriers ------------------------------------------

    async def _on_register(
        self, request: KVRequest, body: bytes
    ) -> Tuple[KVReply, bytes]:
        reg = Registration.model_validate(request.args)
        self._check_running()
        if self.config_hash is None:
            self.config_hash = reg.config_hash
        elif reg.config_hash != self.config_hash:
            raise JoinRefused(
                f"'{reg.node_id}' runs config {reg.config_hash[:12]}, "
                f"mesh runs {self.config_hash[:12]}"
            )
        if self.state.is_member(reg.node_id) or reg.node_id in self._pending:
            raise JoinRefused(f"node id '{reg.node_id}' is already registered")

        mode = reg.join_mode
        if not self._committed:
            mode = "founder"
        elif mode == "founder":
            mode = "blocking"
        self._pending[reg.node_id] = reg.model_copy(update={"join_mode": mode})
        self._last_seen[reg.node_id] = self._now()
        logger.info(f"registered '{reg.node_id}' as {mode} at t={self._now():.3f}")
        self.store.changed.notify()
        return KVReply(result={"join_mode": mode}), b""

    def _blocking_joiners(self, step: int) -> List[str]:
        return [
            m.node_id
            for m in self.state.members
            if m.joined_step == step
            and m.join_mode == "blocking"
            and m.node_id in self.state.joining
        ]

    def _released(self, step: int, node_id: str) -> bool:
        if self.state.halted:
            return True
        if not self.state.is_member(node_id) and node_id not in self._pending:
            return True
        return step in self._committed and not self._blocking_joiners(step)

    def _ready(self, step: int) -> bool:
        arrived = self._arrived.get(step, set())
        if not self.state.members:
            founders = [node for node in arrived if node in self._pending]
            return len(founders) >= self.settings.bootstrap_size
        required = [
            m.node_id
            for m in self.state.members
            if m.joined_step < step and m.node_id not in self._leaving
        ]
        return all(node in arrived for node in required)

    def _try_commit(self) -> None:
        for step in sorted(self._arrived):
            if self.state.halted:
                return
            if step not in self._committed and self._ready(step):
                self._commit_barrier(step)

    async def _on_barrier(
        self, request: KVRequest, body: bytes
    ) -> Tuple[KVReply, bytes]:
        node = request.node_id
        step = int(request.args["step"])
        self._check_running()
        if not self.state.is_member(node) and node not in self._pending:
            raise FatalTrainingError(
                f"'{node}' is not a member at epoch {self.state.epoch}"
            )
        self._touch(node)
        self._arrived.setdefault(step, set()).add(node)
        self._try_commit()

        released = await self.store.changed.wait_for(
            lambda: self._released(step, node), request.timeout
        )
        if not released:
            raise KVTimeout(f"barrier {step} not released in {request.timeout}s")
        self._check_running()
        if not self.state.is_member(node):
            raise FatalTrainingError(f"'{node}' was evicted during barrier {step}")
        return self._state_reply()

    def _commit_barrier(self, step: int) -> None:
        admitted = sorted(self._pending.values(), key=lambda r: r.node_id)
        self._pending.clear()
        left = sorted(self._leaving)
        self._leaving.clear()
        members = [
            m
            for m in sorted(self.state.members, key=lambda m: m.rank)
            if m.node_id not in left
        ]
        for node in left:
            self._forget(node)
        for reg in admitted:
            members.append(
                MemberInfo(
                    node_id=reg.node_id,
                    rank=len(members),
                    host=reg.host,
                    port=reg.port,
                    shard_id=self._next_shard,
                    joined_step=step,
                    join_mode=reg.join_mode,
                )
            )
            self._next_shard += 1
        joining = [n for n in self.state.joining if n not in left] + [
            reg.node_id for reg in admitted if reg.join_mode != "founder"
        ]
        self._install(members, joining, step)
        self._committed[step] = self.state.epoch
        self._round_size = self.state.k
        self._round_losses = 0

        for reg in admitted:
            assignment = JoinAssignment(
                epoch=self.state.epoch,
                rank=self.state.rank_of(reg.node_id),
                shard_id=self._shard_of(reg.node_id),
                start_step=step,
                join_mode=reg.join_mode,
                donors=self.state.donors_for(reg.node_id),
            )
            self.store.set(
                join_key(reg.node_id), assignment.model_dump_json().encode("utf-8")
            )
        logger.info(
            f"barrier {step} committed: epoch {self.state.epoch}, "
            f"members {self.state.member_ids}, "
            f"admitted {[r.node_id for r in admitted]}, left {left}"
        )
        for hook in self._hooks:
            hook(step, self.state)

    def _shard_of(self, node_id: str) -> int:
        member = self.state.member(node_id)
        assert member is not None
        return member.shard_id

    async def _on_join_done(
        self, request: KVRequest, body: bytes
    ) -> Tuple[KVReply, bytes]:
        node = request.node_id
        self._check_running()
        if node in self.state.joining:
            joining = [n for n in self.state.joining if n != node]
            self.state = self.state.model_copy(update={"joining": joining})
            self._publish()
            logger.info(f"'{node}' finished syncing")
        return self._state_reply()

    # -- membership changes ---------------------------------------------------

    def _install(
        self, members: List[MemberInfo], joining: List[str], outer_step: int
    ) -> None:
        ranked = [
            m.model_copy(update={"rank": rank})
            for rank, m in enumerate(sorted(members, key=lambda m: m.rank))
        ]
        ids = [m.node_id for m in ranked]
        self._ingest_bandwidth(ids)
        ring = list(self.tracker.propose(ids).order)
        changed = sorted(ids) != sorted(self.state.member_ids)
        changed = changed or ring != self.state.ring
        self.state = MeshState(
            epoch=self.state.epoch + 1 if changed else self.state.epoch,
            members=ranked,
            ring=ring,
            joining=joining,
            outer_step=outer_step,
            halted=self.state.halted,
            halt_reason=self.state.halt_reason,
        )
        self._publish()

    def _ingest_bandwidth(self, member_ids: List[str]) -> None:
        for node in member_ids:
            raw, version = self.store.get(bandwidth_key(node))
            if raw is None or version <= self._bandwidth_seen.get(node, 0):
                continue
            self._bandwidth_seen[node] = version
            try:
                row = {peer: float(bps) for peer, bps in json.loads(raw).items()}
            except (ValueError, AttributeError) as exc:
                logger.warning(f"ignoring malformed bandwidth row from '{node}': {exc}")
                continue
            self.tracker.observe(node, row)

    def evict(self, node_id: str, reason: str, failure: bool = True) -> bool:
        """Remove ``node_id`` now; returns False if it was not known."""
        if node_id in self._pending:
            del self._pending[node_id]
            self._last_seen.pop(node_id, None)
            logger.warning(f"dropped pending '{node_id}': {reason}")
            self.store.changed.notify()
            return True
        if not self.state.is_member(node_id):
            return False

        self._forget(node_id)
        self.evictions.append((self._now(), node_id, reason))
        members = [m for m in self.state.members if m.node_id != node_id]
        joining = [n for n in self.state.joining if n != node_id]
        self._install(members, joining, self.state.outer_step)
        logger.warning(
            f"evicted '{node_id}' at t={self._now():.3f} ({reason}); "
            f"epoch {self.state.epoch}, members {self.state.member_ids}"
        )

        if failure:
            self._round_losses += 1
        if not self.state.members:
            self._halt("no members left")
        elif (
            self._round_size
            and self._round_losses / self._round_size
            > self.settings.mass_failure_fraction
        ):
            self._halt(
                f"lost {self._round_losses} of {self._round_size} members in one round"
            )
        self._try_commit()
        return True

    def _forget(self, node_id: str) -> None:
        self._leaving.discard(node_id)
        self._last_seen.pop(node_id, None)
        self._bandwidth_seen.pop(node_id, None)
        self.tracker.forget(node_id)

    def _halt(self, reason: str) -> None:
        logger.error(f"halting mesh: {reason}")
        self.state = self.state.model_copy(
            update={"halted": True, "halt_reason": reason}
        )
        self._publish()

    async def _on_report(
        self, request: KVRequest, body: bytes
    ) -> Tuple[KVReply, bytes]:
        failed = str(request.args["failed"])
        epoch = int(request.args["epoch"])
        if epoch != self.state.epoch:
            logger.info(
                f"ignoring stale report on '{failed}' from '{request.node_id}' "
                f"(epoch {epoch}, now {self.state.epoch})"
            )
            return KVReply(result={"evicted": False}), b""
        evicted = False
        if failed != request.node_id:
            evicted = self.evict(
                failed, f"reported by '{request.node_id}' in epoch {epoch}"
            )
        return KVReply(result={"evicted": evicted}), b""

    async def _on_leave(
        self, request: KVRequest, body: bytes
    ) -> Tuple[KVReply, bytes]:
        node = request.node_id
        if node in self._pending:
            self.evict(node, "left before admission", failure=False)
        elif self.state.is_member(node) and node not in self._leaving:
            self._leaving.add(node)
            logger.info(
                f"'{node}' leaves at the next barrier (t={self._now():.3f}, "
                f"epoch {self.state.epoch})"
            )
            self._try_commit()
        return KVReply(), b""

    # -- collective commits ---------------------------------------------------

    async def _on_collective_done(
        self, request: KVRequest, body: bytes
    ) -> Tuple[KVReply, bytes]:
        job = int(request.args["job_id"])
        epoch = int(request.args["epoch"])
        self._check_running()
        if job not in self._collectives and epoch == self.state.epoch:
            done = self._done.setdefault((job, epoch), set())
            done.add(request.node_id)
            if set(self.state.member_ids) <= done:
                self._collectives[job] = epoch
                for key in [key for key in self._done if key[0] == job]:
                    del self._done[key]
                logger.debug(f"collective {job} committed at epoch {epoch}")
                self.store.changed.notify()
            else:
                await self.store.changed.wait_for(
                    lambda: job in self._collectives
                    or self.state.epoch != epoch
                    or self.state.halted,
                    request.timeout,
                )
        self._check_running()
        return KVReply(result={"committed": self._collectives.get(job) == epoch}), b""

    # -- liveness -------------------------------------------------------------

    def _touch(self, node_id: str) -> None:
        if self.state.is_member(node_id) or node_id in self._pending:
            self._last_seen[node_id] = max(
                self._last_seen.get(node_id, 0.0), self._now()
            )

    async def _heartbeat_session(self, link: Link) -> None:
        try:
            while True:
                frame = await link.recv()
                beat, _ = unpack_message(frame.payload, Heartbeat)
                if frame.kind == FrameKind.HEARTBEAT:
                    self._touch(beat.node_id)
                elif frame.kind == FrameKind.DEATHRATTLE:
                    self.evict(beat.node_id, f"deathrattle: {beat.reason}")
        except MeshError as exc:
            logger.debug(f"heartbeat stream from '{link.peer_id}' ended: {exc}")
        finally:
            await link.close()

    async def _accept_heartbeats(self) -> None:
        sessions: Set["asyncio.Task[None]"] = set()
        try:
            while True:
                link = await self.transport.accept(HEARTBEAT_CHANNEL)
                task = asyncio.ensure_future(self._heartbeat_session(link))
                sessions.add(task)
                task.add_done_callback(sessions.discard)
        finally:
            for task in list(sessions):
                task.cancel()

    def detect_failures(self) -> List[str]:
        """Evict every node silent for longer than the heartbeat timeout."""
        now = self._now()
        limit = self.settings.heartbeat_timeout
        silent = [
            node
            for node in self.state.member_ids + sorted(self._pending)
            if node not in self._leaving
            and now - self._last_seen.get(node, now) > limit
        ]
        for node in silent:
            quiet = now - self._last_seen.get(node, now)
            self.evict(node, f"no heartbeat for {quiet:.1f}s")
        return silent

    async def _detect_loop(self) -> None:
        while True:
            await asyncio.sleep(self.settings.heartbeat_interval)
            if not self.state.halted:
                self.detect_failures()
