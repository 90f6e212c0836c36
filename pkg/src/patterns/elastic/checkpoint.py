# src/patterns/elastic/checkpoint.py

"""Node state snapshots, their canonical encoding, and peer-to-peer transfer.

Canonical stream: u64 LE body length, 32-byte sha256 of the body, body.
The body is a JSON metadata header (:func:`pack_message`) followed by five
parameter blocks in a fixed order: shared parameters, retained copy, AdamW
first moment, AdamW second moment, outer momentum buffer.

A joiner asks one donor for the snapshot taken at a given outer-step
boundary. The donor streams it as ``CHECKPOINT`` frames of at most
:data:`TRANSFER_CHUNK` bytes. A hash mismatch, a stale snapshot or a dropped
link moves the joiner on to the next donor.
"""

import asyncio
import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Set, Union

from pydantic import BaseModel

from src.core.errors import (
    DecodeError,
    LinkError,
    LinkTimeout,
    TransferError,
)
from src.core.numerics import AdamWState, ModelParams, NesterovState
from src.core.transport import (
    Frame,
    FrameKind,
    Link,
    PeerAddr,
    Transport,
    pack_message,
    unpack_message,
)

logger = logging.getLogger(__name__)

CHECKPOINT_CHANNEL = "ckpt"
STREAM_HEADER = struct.Struct("<Q32s")
TRANSFER_CHUNK = 1 << 20
TRANSFER_TIMEOUT: Optional[float] = 60.0


def config_hash(config: BaseModel, exclude: Optional[Set[str]] = None) -> str:
    """Stable sha256 of a configuration model, minus node-local fields."""
    payload = config.model_dump(mode="json", exclude=exclude)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class CheckpointMeta(BaseModel):
    outer_step: int
    adam_step: int
    data_position: int
    shard_id: int
    config_hash: str


class CheckpointRequest(BaseModel):
    node_id: str
    outer_step: int


class CheckpointReply(BaseModel):
    ok: bool
    size: int = 0
    error: Optional[str] = None


@dataclass(frozen=True)
class Checkpoint:
    """Everything a node needs to continue from an outer-step boundary."""

    outer_step: int
    params: ModelParams
    retained: ModelParams
    adam: AdamWState
    nesterov: NesterovState
    data_position: int
    shard_id: int
    config_hash: str

    def body(self) -> bytes:
        meta = CheckpointMeta(
            outer_step=self.outer_step,
            adam_step=self.adam.step,
            data_position=self.data_position,
            shard_id=self.shard_id,
            config_hash=self.config_hash,
        )
        return pack_message(meta) + b"".join(
            block.to_bytes()
            for block in (
                self.params,
                self.retained,
                self.adam.m,
                self.adam.v,
                self.nesterov.buffer,
            )
        )

    def to_bytes(self) -> bytes:
        body = self.body()
        return STREAM_HEADER.pack(len(body), hashlib.sha256(body).digest()) + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        """Decode and verify a canonical stream.

        Raises:
            DecodeError: If the stream is truncated, padded or fails its hash.
        """
        if len(buf) < STREAM_HEADER.size:
            raise DecodeError("checkpoint stream shorter than its header")
        size, digest = STREAM_HEADER.unpack_from(buf, 0)
        body = bytes(buf[STREAM_HEADER.size:])
        if len(body) != size:
            raise DecodeError(f"checkpoint declares {size} bytes, got {len(body)}")
        if hashlib.sha256(body).digest() != digest:
            raise DecodeError("checkpoint hash mismatch")

        meta, rest = unpack_message(body, CheckpointMeta)
        blocks: List[ModelParams] = []
        offset = 0
        for _ in range(5):
            block, offset = ModelParams.from_bytes(rest, offset)
            blocks.append(block)
        if offset != len(rest):
            raise DecodeError(f"{len(rest) - offset} trailing bytes in checkpoint")
        params, retained, m, v, buffer = blocks
        return cls(
            outer_step=meta.outer_step,
            params=params,
            retained=retained,
            adam=AdamWState(step=meta.adam_step, m=m, v=v),
            nesterov=NesterovState(buffer=buffer),
            data_position=meta.data_position,
            shard_id=meta.shard_id,
            config_hash=meta.config_hash,
        )

    def digest(self) -> str:
        return hashlib.sha256(self.body()).hexdigest()

    def bit_equal(self, other: "Checkpoint") -> bool:
        return self.to_bytes() == other.to_bytes()


# -- disk -------------------------------------------------------------------


def checkpoint_path(directory: Union[str, Path], node_id: str, step: int) -> Path:
    return Path(directory) / node_id / f"step_{step:06d}.ckpt"


def save_checkpoint_file(
    checkpoint: Checkpoint, directory: Union[str, Path], node_id: str
) -> Path:
    path = checkpoint_path(directory, node_id, checkpoint.outer_step)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(checkpoint.to_bytes())
    tmp.replace(path)
    logger.info(f"saved checkpoint for '{node_id}' at step {checkpoint.outer_step}")
    return path


def load_checkpoint_file(path: Union[str, Path]) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def saved_steps(directory: Union[str, Path], node_id: str) -> List[int]:
    """Outer steps with a checkpoint on disk for ``node_id``, ascending."""
    folder = Path(directory) / node_id
    if not folder.is_dir():
        return []
    return sorted(int(path.stem[len("step_") :]) for path in folder.glob("step_*.ckpt"))


def latest_checkpoint_file(
    directory: Union[str, Path], node_id: str
) -> Optional[Path]:
    """Most recent saved checkpoint for ``node_id``, if any."""
    steps = saved_steps(directory, node_id)
    return checkpoint_path(directory, node_id, steps[-1]) if steps else None


# -- transfer ---------------------------------------------------------------

SnapshotProvider = Callable[[int], Optional[Checkpoint]]


async def _serve_one(link: Link, provider: SnapshotProvider) -> None:
    try:
        frame = await link.recv(TRANSFER_TIMEOUT)
        request, _ = unpack_message(frame.payload, CheckpointRequest)
        snapshot = provider(request.outer_step)
        if snapshot is None:
            reply = CheckpointReply(
                ok=False, error=f"no snapshot for step {request.outer_step}"
            )
            await link.send(Frame(FrameKind.CHECKPOINT, pack_message(reply)))
            return
        stream = snapshot.to_bytes()
        reply = CheckpointReply(ok=True, size=len(stream))
        await link.send(Frame(FrameKind.CHECKPOINT, pack_message(reply)))
        for start in range(0, len(stream), TRANSFER_CHUNK):
            chunk = stream[start : start + TRANSFER_CHUNK]
            await link.send(Frame(FrameKind.CHECKPOINT, chunk))
        logger.info(
            f"served step {request.outer_step} checkpoint "
            f"({len(stream)} bytes) to '{request.node_id}'"
        )
    except (LinkError, LinkTimeout, DecodeError) as exc:
        logger.warning(f"checkpoint transfer to '{link.peer_id}' failed: {exc}")
    finally:
        await link.close()


async def serve_checkpoints(transport: Transport, provider: SnapshotProvider) -> None:
    """Answer checkpoint requests until cancelled.

    ``provider(step)`` returns the snapshot taken at the start of outer
    step ``step``, or ``None`` if this node no longer holds it.
    """
    transfers: Set["asyncio.Task[None]"] = set()
    try:
        while True:
            link = await transport.accept(CHECKPOINT_CHANNEL)
            task = asyncio.ensure_future(_serve_one(link, provider))
            transfers.add(task)
            task.add_done_callback(transfers.discard)
    finally:
        for task in list(transfers):
            task.cancel()


async def _fetch_from(
    transport: Transport, donor: PeerAddr, outer_step: int, timeout: Optional[float]
) -> Checkpoint:
    link = await transport.connect(donor, CHECKPOINT_CHANNEL, timeout)
    try:
        request = CheckpointRequest(node_id=transport.node_id, outer_step=outer_step)
        await link.send(Frame(FrameKind.CHECKPOINT, pack_message(request)))
        reply, _ = unpack_message((await link.recv(timeout)).payload, CheckpointReply)
        if not reply.ok:
            raise TransferError(f"donor '{donor.node_id}': {reply.error}")
        received = bytearray()
        while len(received) < reply.size:
            received += (await link.recv(timeout)).payload
    finally:
        await link.close()
    if len(received) != reply.size:
        raise TransferError(f"donor '{donor.node_id}' sent {len(received)} bytes")
    try:
        return Checkpoint.from_bytes(bytes(received))
    except DecodeError as exc:
        raise TransferError(f"donor '{donor.node_id}': {exc}") from exc


async def fetch_checkpoint(
    transport: Transport,
    donors: List[PeerAddr],
    outer_step: int,
    expected_hash: Optional[str] = None,
    timeout: Optional[float] = TRANSFER_TIMEOUT,
) -> Checkpoint:
    """Fetch the step ``outer_step`` snapshot from the first donor that works.

    Raises:
        TransferError: If every donor failed or none was offered.
    """
    errors: List[str] = []
    for donor in donors:
        try:
            checkpoint = await _fetch_from(transport, donor, outer_step, timeout)
        except (LinkError, LinkTimeout, TransferError, DecodeError) as exc:
            logger.warning(
                f"{transport.node_id}: donor '{donor.node_id}' failed: {exc}"
            )
            errors.append(f"{donor.node_id}: {exc}")
            continue
        if checkpoint.outer_step != outer_step:
            errors.append(f"{donor.node_id}: step {checkpoint.outer_step}")
            continue
        if expected_hash is not None and checkpoint.config_hash != expected_hash:
            errors.append(f"{donor.node_id}: config hash mismatch")
            continue
        logger.info(
            f"{transport.node_id}: fetched step {outer_step} checkpoint "
            f"from '{donor.node_id}'"
        )
        return checkpoint
    raise TransferError(
        f"no donor could supply step {outer_step}: {errors or 'no donors offered'}"
    )
