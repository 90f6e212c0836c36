# src/core/transport/base.py

"""Transport abstraction shared by the TCP and simulated implementations.

A :class:`Transport` owns one node's endpoint. Links are opened per
``(peer, channel)``: ``connect`` dials a peer on a named logical channel and
the peer picks the link up with ``accept(channel)``. Frames on a link arrive
whole and in send order.
"""

import asyncio
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, TypeVar

from src.core.errors import LinkError, LinkTimeout
from src.core.transport.frames import Frame

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class PeerAddr:
    """How to reach a node.

    For TCP ``host``/``port`` are a socket endpoint; on the simulator the
    node id alone is the handle and the endpoint fields are informational.
    """

    node_id: str
    host: str = "sim"
    port: int = 0

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass
class TrafficCounters:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_received: int = 0

    def record_sent(self, frame: Frame) -> None:
        self.bytes_sent += frame.wire_size
        self.frames_sent += 1

    def record_received(self, frame: Frame) -> None:
        self.bytes_received += frame.wire_size
        self.frames_received += 1


async def queue_get(queue: "asyncio.Queue[T]", timeout: Optional[float]) -> T:
    """``queue.get()`` with a timeout that never loses an item.

    Raises:
        asyncio.TimeoutError: If nothing arrived in time.
    """
    if timeout is None:
        return await queue.get()
    if not queue.empty():
        return queue.get_nowait()
    getter = asyncio.ensure_future(queue.get())
    try:
        done, _ = await asyncio.wait({getter}, timeout=timeout)
    except asyncio.CancelledError:
        getter.cancel()
        raise
    if getter in done:
        return getter.result()
    getter.cancel()
    raise asyncio.TimeoutError()


class Link(ABC):
    """One ordered, framed, bidirectional stream to a peer."""

    def __init__(self, peer_id: str, channel: str, counters: TrafficCounters):
        self.peer_id = peer_id
        self.channel = channel
        self.counters = counters
        self.bytes_sent = 0
        self.bytes_received = 0

    @abstractmethod
    async def send(self, frame: Frame) -> None:
        """Queue ``frame`` for delivery.

        Raises:
            LinkError: If the link is closed, dropped or the peer is gone.
        """

    @abstractmethod
    async def recv(self, timeout: Optional[float] = None) -> Frame:
        """Wait for the next frame.

        Raises:
            LinkTimeout: If ``timeout`` seconds pass with nothing received.
            LinkError: If the peer closed or the link dropped.
        """

    @abstractmethod
    async def close(self) -> None:
        """Close the link; idempotent."""

    def _count_sent(self, frame: Frame) -> None:
        self.bytes_sent += frame.wire_size
        self.counters.record_sent(frame)

    def _count_received(self, frame: Frame) -> None:
        self.bytes_received += frame.wire_size
        self.counters.record_received(frame)

    async def __aenter__(self) -> "Link":
        return self

    async def __aexit__(self, *exc_info: Any) -> None:
        await self.close()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(peer={self.peer_id!r}, channel={self.channel!r})"


class Transport(ABC):
    """A node's endpoint: dials peers, accepts links, models compute cost."""

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.counters = TrafficCounters()
        self._incoming: Dict[str, "asyncio.Queue[Link]"] = {}

    @property
    @abstractmethod
    def address(self) -> PeerAddr:
        """Address other nodes use to reach this transport."""

    @abstractmethod
    async def start(self) -> None:
        """Begin accepting links."""

    @abstractmethod
    async def stop(self) -> None:
        """Stop accepting and release resources."""

    @abstractmethod
    async def connect(
        self, addr: PeerAddr, channel: str, timeout: Optional[float] = None
    ) -> Link:
        """Open a link to ``addr`` on ``channel``.

        Raises:
            LinkError: If the peer refuses or is unreachable.
        """

    async def accept(self, channel: str, timeout: Optional[float] = None) -> Link:
        """Wait for a peer to connect on ``channel``.

        Raises:
            LinkTimeout: If no peer connects within ``timeout``.
        """
        try:
            return await queue_get(self._queue(channel), timeout)
        except asyncio.TimeoutError:
            raise LinkTimeout(None, timeout) from None

    @abstractmethod
    async def run_codec(self, fn: Callable[..., T], *args: Any, nbytes: int = 0) -> T:
        """Run CPU-bound codec work ``fn(*args)`` off the protocol path."""

    @abstractmethod
    async def compute(self, seconds: float) -> None:
        """Account for ``seconds`` of local compute (simulated transports only)."""

    def now(self) -> float:
        return asyncio.get_running_loop().time()

    def _queue(self, channel: str) -> "asyncio.Queue[Link]":
        queue = self._incoming.get(channel)
        if queue is None:
            queue = asyncio.Queue()
            self._incoming[channel] = queue
        return queue

    def _deliver_incoming(self, link: Link) -> None:
        logger.debug(
            f"{self.node_id}: incoming link from {link.peer_id} on {link.channel}"
        )
        self._queue(link.channel).put_nowait(link)

    def discard_channel(self, channel: str) -> None:
        """Forget unclaimed incoming links on ``channel``."""
        self._incoming.pop(channel, None)


def link_error_from(exc: BaseException, peer_id: Optional[str]) -> LinkError:
    if isinstance(exc, LinkError):
        return exc
    return LinkError(peer_id, f"link to '{peer_id}' failed: {exc!r}")
