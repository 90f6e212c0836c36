# src/patterns/collectives/pipeline.py

"""Segment scheduling for one ring hop.

Every chunk a node sends in one ring step is cut into fixed-size segments.
In int8 mode each segment is quantized on its own (statistics are per
transmitted segment). The schedule decides only *when* codec work runs:

- serial: encode segment i, send it, then encode segment i+1; receive
  segment i, decode it, then receive segment i+1.
- pipelined: an encoder task feeds a queue the sender drains, and a
  receiver task feeds a queue the decoder drains, so codec work for one
  segment overlaps transmission of its neighbour.

Both schedules produce the same bytes in the same order.
"""

import asyncio
import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Awaitable, Callable, List, Optional, Tuple, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.codec import decode_chunk, dequantize, encode_chunk, quantize
from src.core.errors import DecodeError, StalePlanError, StructuralError
from src.core.transport import Frame, FrameKind, Link, Transport

logger = logging.getLogger(__name__)

T = TypeVar("T")

CHUNK_HEADER = struct.Struct("<QIIBB")
DEFAULT_SEGMENT_ELEMS = 1 << 18


class ReduceMode(IntEnum):
    FP32 = 0
    INT8 = 1

    @classmethod
    def parse(cls, value: Union[str, int, "ReduceMode"]) -> "ReduceMode":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown reduce mode '{value}'") from None
        return cls(value)


class Phase(IntEnum):
    REDUCE_SCATTER = 0
    ALL_GATHER = 1
    ABORT = 2


class CollectiveOptions(BaseModel):
    """Knobs for one collective; shared by every participant."""

    model_config = ConfigDict(frozen=True)

    segment_elems: int = Field(
        default=DEFAULT_SEGMENT_ELEMS, gt=0, description="Elements per segment"
    )
    pipelined: bool = Field(default=True, description="Overlap codec and link I/O")
    op_timeout: Optional[float] = Field(
        default=60.0, gt=0, description="Seconds to wait on any single link operation"
    )
    abort_linger: float = Field(
        default=30.0, ge=0, description="Seconds to keep links open after an abort"
    )


@dataclass(frozen=True)
class ChunkHeader:
    job_id: int
    epoch: int
    chunk: int
    phase: Phase
    mode: ReduceMode

    def pack(self) -> bytes:
        return CHUNK_HEADER.pack(
            self.job_id, self.epoch, self.chunk, int(self.phase), int(self.mode)
        )

    @classmethod
    def unpack(cls, payload: bytes) -> Tuple["ChunkHeader", bytes]:
        if len(payload) < CHUNK_HEADER.size:
            raise DecodeError("allreduce frame shorter than its chunk header")
        job_id, epoch, chunk, phase, mode = CHUNK_HEADER.unpack_from(payload, 0)
        try:
            header = cls(job_id, epoch, chunk, Phase(phase), ReduceMode(mode))
        except ValueError as exc:
            raise DecodeError(f"bad allreduce chunk header: {exc}") from exc
        return header, payload[CHUNK_HEADER.size:]


class RingAborted(Exception):
    """An upstream participant abandoned the collective."""


def segment_bounds(length: int, segment_elems: int) -> List[Tuple[int, int]]:
    return [
        (start, min(start + segment_elems, length))
        for start in range(0, length, segment_elems)
    ]


def encode_segment(mode: ReduceMode, values: np.ndarray) -> bytes:
    if mode == ReduceMode.FP32:
        return np.ascontiguousarray(values, dtype="<f4").tobytes()
    return encode_chunk(quantize(values))


def decode_segment(mode: ReduceMode, payload: bytes, count: int) -> np.ndarray:
    if mode == ReduceMode.FP32:
        if len(payload) != 4 * count:
            raise DecodeError(f"expected {4 * count} fp32 bytes, got {len(payload)}")
        return np.frombuffer(payload, dtype="<f4").astype(np.float32)
    chunk = decode_chunk(payload)
    if chunk.count != count:
        raise StructuralError(f"expected {count} quantized values, got {chunk.count}")
    return dequantize(chunk)


class HopSchedule:
    """Sends and receives the segments of one chunk per ring step."""

    def __init__(
        self,
        transport: Transport,
        options: CollectiveOptions,
        job_id: int,
        epoch: int,
        mode: ReduceMode,
    ):
        self.transport = transport
        self.options = options
        self.job_id = job_id
        self.epoch = epoch
        self.mode = mode

    def _header(self, chunk: int, phase: Phase) -> bytes:
        return ChunkHeader(self.job_id, self.epoch, chunk, phase, self.mode).pack()

    async def _codec(self, fn: Callable[..., T], *args: Any, nbytes: int) -> T:
        if self.mode == ReduceMode.FP32:
            return fn(*args)
        return await self.transport.run_codec(fn, *args, nbytes=nbytes)

    # -- sending ------------------------------------------------------------

    async def send_values(
        self, link: Link, chunk: int, phase: Phase, values: np.ndarray
    ) -> List[bytes]:
        """Encode ``values`` segment by segment and send; returns the payloads."""
        bounds = segment_bounds(values.size, self.options.segment_elems)
        header = self._header(chunk, phase)
        sent: List[bytes] = []

        async def encode(lo: int, hi: int) -> bytes:
            seg = values[lo:hi]
            return await self._codec(encode_segment, self.mode, seg, nbytes=seg.nbytes)

        if not self.options.pipelined or len(bounds) < 2:
            for lo, hi in bounds:
                body = await encode(lo, hi)
                await link.send(Frame(FrameKind.ALLREDUCE_CHUNK, header + body))
                sent.append(body)
            return sent

        queue: "asyncio.Queue[bytes]" = asyncio.Queue()

        async def produce() -> None:
            for lo, hi in bounds:
                queue.put_nowait(await encode(lo, hi))

        producer = asyncio.ensure_future(produce())
        try:
            for _ in bounds:
                body = await _race(queue.get(), producer)
                await link.send(Frame(FrameKind.ALLREDUCE_CHUNK, header + body))
                sent.append(body)
            await producer
        finally:
            producer.cancel()
        return sent

    async def forward(
        self, link: Link, chunk: int, phase: Phase, bodies: List[bytes]
    ) -> None:
        header = self._header(chunk, phase)
        for body in bodies:
            await link.send(Frame(FrameKind.ALLREDUCE_CHUNK, header + body))

    # -- receiving ----------------------------------------------------------

    async def _recv_body(self, link: Link, chunk: int, phase: Phase) -> bytes:
        frame = await link.recv(self.options.op_timeout)
        if frame.kind != FrameKind.ALLREDUCE_CHUNK:
            raise StalePlanError(f"unexpected {frame.kind.name} frame in a collective")
        header, body = ChunkHeader.unpack(frame.payload)
        if header.phase == Phase.ABORT:
            raise RingAborted(f"collective {header.job_id} aborted upstream")
        if header.job_id != self.job_id or header.epoch != self.epoch:
            raise StalePlanError(
                f"frame for job {header.job_id} epoch {header.epoch}, "
                f"expected job {self.job_id} epoch {self.epoch}"
            )
        if (header.chunk, header.phase, header.mode) != (chunk, phase, self.mode):
            raise StalePlanError(
                f"out-of-order frame: chunk {header.chunk} {header.phase.name}, "
                f"expected chunk {chunk} {phase.name}"
            )
        return body

    async def recv_values(
        self, link: Link, chunk: int, phase: Phase, length: int
    ) -> Tuple[np.ndarray, List[bytes]]:
        """Receive and decode one chunk of ``length`` elements."""
        bounds = segment_bounds(length, self.options.segment_elems)
        out = np.empty(length, dtype=np.float32)
        bodies: List[bytes] = []

        async def decode(lo: int, hi: int, body: bytes) -> None:
            out[lo:hi] = await self._codec(
                decode_segment, self.mode, body, hi - lo, nbytes=4 * (hi - lo)
            )

        if not self.options.pipelined or len(bounds) < 2:
            for lo, hi in bounds:
                body = await self._recv_body(link, chunk, phase)
                await decode(lo, hi, body)
                bodies.append(body)
            return out, bodies

        queue: "asyncio.Queue[bytes]" = asyncio.Queue()

        async def receive() -> None:
            for _ in bounds:
                queue.put_nowait(await self._recv_body(link, chunk, phase))

        receiver = asyncio.ensure_future(receive())
        try:
            for lo, hi in bounds:
                body = await _race(queue.get(), receiver)
                await decode(lo, hi, body)
                bodies.append(body)
            await receiver
        finally:
            receiver.cancel()
        return out, bodies

    async def send_abort(self, link: Link) -> None:
        await link.send(Frame(FrameKind.ALLREDUCE_CHUNK, self._header(0, Phase.ABORT)))


async def _race(item: Awaitable[bytes], worker: "asyncio.Future[None]") -> bytes:
    """Await ``item`` unless ``worker`` fails first (its error is re-raised)."""
    getter = asyncio.ensure_future(item)
    try:
        while not getter.done():
            if worker.done():
                worker.result()
                return await getter
            await asyncio.wait({getter, worker}, return_when=asyncio.FIRST_COMPLETED)
        return getter.result()
    except BaseException:
        getter.cancel()
        raise
