# src/patterns/collectives/ring.py

"""Chunked ring all-reduce over framed links.

The flat tensor is split into k near-equal contiguous chunks (chunk ``i``
spans ``[i*n//k, (i+1)*n//k)``). Ring position ``r`` sends to ``r+1`` and
receives from ``r-1``.

Reduce-scatter: at step ``s`` position ``r`` sends its partial sum of chunk
``(r-s) % k`` and adds its own slice to the partial of chunk ``(r-s-1) % k``
it receives. After k-1 steps position ``r`` holds the full sum of chunk
``(r+1) % k`` and divides it by k. Chunk ``c`` is therefore summed in ring
order starting at position ``c``.

All-gather: each owner sends its mean (raw fp32, or one quantized encoding)
and every hop forwards the identical bytes, so all participants finish with
bit-identical results in both modes.
"""

import asyncio
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Awaitable, List, Optional, Sequence, Set, Tuple

import numpy as np

from src.core.errors import (
    DecodeError,
    LinkError,
    LinkTimeout,
    RingFailure,
    StalePlanError,
    StructuralError,
)
from src.core.transport import Link, PeerAddr, Transport
from src.patterns.collectives.pipeline import (
    CollectiveOptions,
    HopSchedule,
    Phase,
    ReduceMode,
    RingAborted,
    decode_segment,
    segment_bounds,
)

logger = logging.getLogger(__name__)

_lingering: Set["asyncio.Task[None]"] = set()
_ABORTING = (RingFailure, RingAborted, StalePlanError, DecodeError, StructuralError)


@dataclass(frozen=True)
class RingPlan:
    """Who takes part in one collective attempt, in ring order."""

    epoch: int
    order: Tuple[PeerAddr, ...]
    numel: int

    def __post_init__(self) -> None:
        ids = [peer.node_id for peer in self.order]
        if len(set(ids)) != len(ids):
            raise StructuralError(f"ring order repeats a node: {ids}")
        if self.numel < 0:
            raise StructuralError(f"tensor size must be nonnegative, got {self.numel}")

    @property
    def k(self) -> int:
        return len(self.order)

    @property
    def node_ids(self) -> List[str]:
        return [peer.node_id for peer in self.order]

    def position(self, node_id: str) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise StructuralError(
                f"node '{node_id}' is not in the ring for epoch {self.epoch}"
            ) from None

    def chunk_bounds(self, chunk: int) -> Tuple[int, int]:
        return chunk * self.numel // self.k, (chunk + 1) * self.numel // self.k

    def channel(self, job_id: int) -> str:
        return f"ar/{job_id}/{self.epoch}"

    def without(self, node_id: str, epoch: int) -> "RingPlan":
        order = tuple(peer for peer in self.order if peer.node_id != node_id)
        return RingPlan(epoch, order, self.numel)


@dataclass(frozen=True)
class ReduceJob:
    """One all-reduce request; the input is frozen so any attempt can restart."""

    job_id: int
    tensor: np.ndarray
    mode: ReduceMode
    plan: RingPlan
    digest: str = field(init=False)

    def __post_init__(self) -> None:
        frozen = np.array(self.tensor, dtype=np.float32).ravel()
        frozen.setflags(write=False)
        if frozen.size != self.plan.numel:
            raise StructuralError(
                f"job {self.job_id}: tensor has {frozen.size} elements, "
                f"plan expects {self.plan.numel}"
            )
        object.__setattr__(self, "tensor", frozen)
        object.__setattr__(self, "mode", ReduceMode.parse(self.mode))
        object.__setattr__(self, "digest", hashlib.sha256(frozen.tobytes()).hexdigest())

    def with_plan(self, plan: RingPlan) -> "ReduceJob":
        return ReduceJob(self.job_id, self.tensor, self.mode, plan)


class _RingSession:
    def __init__(
        self,
        transport: Transport,
        job: ReduceJob,
        options: CollectiveOptions,
        out_link: Link,
        in_link: Link,
    ):
        plan = job.plan
        self.plan = plan
        self.job = job
        self.me = plan.position(transport.node_id)
        self.left = plan.order[(self.me - 1) % plan.k].node_id
        self.right = plan.order[(self.me + 1) % plan.k].node_id
        self.out_link = out_link
        self.in_link = in_link
        self.hops = HopSchedule(transport, options, job.job_id, plan.epoch, job.mode)
        self.segment_elems = options.segment_elems

    def _slice(self, chunk: int) -> slice:
        lo, hi = self.plan.chunk_bounds(chunk)
        return slice(lo, hi)

    async def _send(self, chunk: int, phase: Phase, values: np.ndarray) -> List[bytes]:
        try:
            return await self.hops.send_values(self.out_link, chunk, phase, values)
        except LinkError as exc:
            raise RingFailure(self.right, f"send to '{self.right}': {exc}") from exc

    async def _forward(self, chunk: int, bodies: List[bytes]) -> None:
        try:
            await self.hops.forward(self.out_link, chunk, Phase.ALL_GATHER, bodies)
        except LinkError as exc:
            raise RingFailure(self.right, f"send to '{self.right}': {exc}") from exc

    async def _recv(self, chunk: int, phase: Phase) -> Tuple[np.ndarray, List[bytes]]:
        lo, hi = self.plan.chunk_bounds(chunk)
        try:
            return await self.hops.recv_values(self.in_link, chunk, phase, hi - lo)
        except (LinkError, LinkTimeout) as exc:
            raise RingFailure(self.left, f"recv from '{self.left}': {exc}") from exc

    async def run(self) -> np.ndarray:
        k, me = self.plan.k, self.me
        data = self.job.tensor

        send_chunk = me
        partial = data[self._slice(me)]
        for step in range(k - 1):
            recv_chunk = (me - step - 1) % k
            _, (received, _) = await _both(
                self._send(send_chunk, Phase.REDUCE_SCATTER, partial),
                self._recv(recv_chunk, Phase.REDUCE_SCATTER),
            )
            partial = received + data[self._slice(recv_chunk)]
            send_chunk = recv_chunk

        owned = (me + 1) % k
        mean = (partial / np.float32(k)).astype(np.float32)
        result = np.empty(self.plan.numel, dtype=np.float32)
        sent, (values, bodies) = await _both(
            self._send(owned, Phase.ALL_GATHER, mean),
            self._recv(me, Phase.ALL_GATHER),
        )
        result[self._slice(owned)] = self._decoded(sent, mean.size)
        result[self._slice(me)] = values

        send_chunk = me
        for step in range(1, k - 1):
            recv_chunk = (me - step) % k
            _, (values, received_bodies) = await _both(
                self._forward(send_chunk, bodies),
                self._recv(recv_chunk, Phase.ALL_GATHER),
            )
            result[self._slice(recv_chunk)] = values
            bodies, send_chunk = received_bodies, recv_chunk
        return result

    def _decoded(self, bodies: Sequence[bytes], length: int) -> np.ndarray:
        if self.job.mode == ReduceMode.FP32:
            return np.frombuffer(b"".join(bodies), dtype="<f4").astype(np.float32)
        bounds = segment_bounds(length, self.segment_elems)
        out = np.empty(length, dtype=np.float32)
        for (lo, hi), body in zip(bounds, bodies):
            out[lo:hi] = decode_segment(self.job.mode, body, hi - lo)
        return out


async def _both(first: Awaitable[Any], second: Awaitable[Any]) -> List[Any]:
    """Run two awaitables together; if one fails the other is cancelled."""
    tasks = [asyncio.ensure_future(first), asyncio.ensure_future(second)]
    try:
        return list(await asyncio.gather(*tasks))
    finally:
        for task in tasks:
            task.cancel()


async def _close_later(links: Sequence[Link], delay: float) -> None:
    if delay > 0:
        await asyncio.sleep(delay)
    for link in links:
        await link.close()


async def allreduce(
    transport: Transport,
    job: ReduceJob,
    options: Optional[CollectiveOptions] = None,
) -> np.ndarray:
    """Elementwise mean of ``job.tensor`` across every node in ``job.plan``.

    Every participant returns bit-identical bytes. With one participant the
    input is returned unchanged and nothing is sent.

    Raises:
        RingFailure: A neighbour failed; ``failed_id`` names it, or is
            ``None`` when the collective was aborted further up the ring.
        StalePlanError: A neighbour is running a different job or epoch.
    """
    options = options or CollectiveOptions()
    plan = job.plan
    me = plan.position(transport.node_id)
    if plan.k == 1:
        return job.tensor.copy()

    right = plan.order[(me + 1) % plan.k]
    left = plan.order[(me - 1) % plan.k]
    channel = plan.channel(job.job_id)
    try:
        out_link = await transport.connect(right, channel, options.op_timeout)
    except LinkError as exc:
        raise RingFailure(right.node_id, str(exc)) from exc
    try:
        in_link = await transport.accept(channel, options.op_timeout)
    except LinkTimeout as exc:
        await out_link.close()
        raise RingFailure(left.node_id, f"'{left.node_id}' never connected") from exc
    transport.discard_channel(channel)
    if in_link.peer_id != left.node_id:
        await out_link.close()
        await in_link.close()
        raise RingFailure(
            None, f"expected '{left.node_id}' on {channel}, got '{in_link.peer_id}'"
        )

    session = _RingSession(transport, job, options, out_link, in_link)
    try:
        result = await session.run()
    except _ABORTING as exc:
        await _abort(session, options)
        if isinstance(exc, RingAborted):
            raise RingFailure(None, str(exc)) from exc
        raise
    except BaseException:
        await out_link.close()
        await in_link.close()
        raise
    await out_link.close()
    await in_link.close()
    logger.debug(
        f"{transport.node_id}: allreduce job={job.job_id} epoch={plan.epoch} "
        f"k={plan.k} done"
    )
    return result


async def _abort(session: _RingSession, options: CollectiveOptions) -> None:
    try:
        await session.hops.send_abort(session.out_link)
    except LinkError:
        pass
    # Neighbours may still be writing; keep the links readable for a while.
    task = asyncio.ensure_future(
        _close_later([session.out_link, session.in_link], options.abort_linger)
    )
    _lingering.add(task)
    task.add_done_callback(_lingering.discard)
