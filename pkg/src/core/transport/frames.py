# src/core/transport/frames.py

"""Frame kinds and the length-prefixed frame format.

Wire format: u32 LE payload length, u8 kind, payload. Every message kind
used anywhere in the toolkit is registered in :class:`FrameKind`.
"""

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple, Type, TypeVar

from pydantic import BaseModel, ValidationError

from src.core.errors import DecodeError, StructuralError

MAX_PAYLOAD = 16 * 1024 * 1024
FRAME_HEADER = struct.Struct("<IB")
_JSON_LEN = struct.Struct("<I")

M = TypeVar("M", bound=BaseModel)


class FrameKind(IntEnum):
    """Registered message types."""

    HELLO = 1
    HEARTBEAT = 2
    DEATHRATTLE = 3
    KV_OP = 4
    KV_REPLY = 5
    CHECKPOINT = 6
    ALLREDUCE_CHUNK = 7
    PROBE = 8
    PROBE_ACK = 9


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    payload: bytes = b""

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", FrameKind(self.kind))
        except ValueError as exc:
            raise StructuralError(f"unregistered frame kind {self.kind!r}") from exc
        if len(self.payload) > MAX_PAYLOAD:
            raise StructuralError(
                f"frame payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}"
            )

    @property
    def wire_size(self) -> int:
        return FRAME_HEADER.size + len(self.payload)

    def encode(self) -> bytes:
        return FRAME_HEADER.pack(len(self.payload), int(self.kind)) + self.payload


def parse_header(header: bytes) -> Tuple[int, FrameKind]:
    """Validate a 5-byte frame header and return ``(length, kind)``."""
    if len(header) != FRAME_HEADER.size:
        raise DecodeError(f"frame header must be {FRAME_HEADER.size} bytes")
    length, raw_kind = FRAME_HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise DecodeError(f"frame length {length} exceeds {MAX_PAYLOAD}")
    try:
        kind = FrameKind(raw_kind)
    except ValueError as exc:
        raise DecodeError(f"unknown frame kind {raw_kind}") from exc
    return length, kind


def decode_frame(buf: bytes) -> Frame:
    """Decode exactly one frame occupying all of ``buf``."""
    length, kind = parse_header(bytes(buf[: FRAME_HEADER.size]))
    if len(buf) != FRAME_HEADER.size + length:
        raise DecodeError(
            f"frame declares {length} payload bytes, buffer holds "
            f"{len(buf) - FRAME_HEADER.size}"
        )
    return Frame(kind, bytes(buf[FRAME_HEADER.size:]))


class Hello(BaseModel):
    """First frame on every connection: who is calling and on which channel."""

    node_id: str
    channel: str


def pack_message(header: BaseModel, body: bytes = b"") -> bytes:
    """Control payload: u32 LE JSON length, JSON header, raw body bytes."""
    raw = header.model_dump_json().encode("utf-8")
    return _JSON_LEN.pack(len(raw)) + raw + body


def unpack_message(payload: bytes, model: Type[M]) -> Tuple[M, bytes]:
    """Inverse of :func:`pack_message`."""
    if len(payload) < _JSON_LEN.size:
        raise DecodeError("control payload shorter than its length prefix")
    (size,) = _JSON_LEN.unpack_from(payload, 0)
    end = _JSON_LEN.size + size
    if end > len(payload):
        raise DecodeError("control header runs past end of payload")
    try:
        header = model.model_validate_json(payload[_JSON_LEN.size:end])
    except ValidationError as exc:
        raise DecodeError(f"invalid {model.__name__}: {exc}") from exc
    return header, bytes(payload[end:])
