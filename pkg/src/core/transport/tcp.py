# src/core/transport/tcp.py

"""Real TCP transport on asyncio streams.

Each link is one TCP connection. The dialing side sends a ``HELLO`` frame
naming itself and the logical channel; the listening side routes the
connection to that channel's accept queue. A background task per link reads
whole frames into an inbox so a timed-out ``recv`` never leaves a partially
consumed frame on the socket.
"""

import asyncio
import logging
from typing import Any, Callable, List, Optional, TypeVar, Union

from src.core.errors import DecodeError, LinkError, LinkTimeout
from src.core.transport.base import (
    Link,
    PeerAddr,
    TrafficCounters,
    Transport,
    queue_get,
)
from src.core.transport.frames import (
    FRAME_HEADER,
    Frame,
    FrameKind,
    Hello,
    parse_header,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")


class _Closed:
    def __init__(self, reason: str):
        self.reason = reason


class TcpLink(Link):
    def __init__(
        self,
        peer_id: str,
        channel: str,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        counters: TrafficCounters,
        on_close: Optional[Callable[["TcpLink"], None]] = None,
    ):
        super().__init__(peer_id, channel, counters)
        self._on_close = on_close
        self._reader = reader
        self._writer = writer
        self._inbox: "asyncio.Queue[Union[Frame, _Closed]]" = asyncio.Queue()
        self._closed = False
        self._finished = asyncio.Event()
        self._pump_task = asyncio.ensure_future(self._pump())

    async def _pump(self) -> None:
        try:
            while True:
                header = await self._reader.readexactly(FRAME_HEADER.size)
                length, kind = parse_header(header)
                payload = await self._reader.readexactly(length) if length else b""
                frame = Frame(kind, payload)
                self._count_received(frame)
                self._inbox.put_nowait(frame)
        except asyncio.IncompleteReadError:
            self._inbox.put_nowait(_Closed("closed by peer"))
        except (ConnectionError, OSError, DecodeError) as exc:
            self._inbox.put_nowait(_Closed(repr(exc)))
        except asyncio.CancelledError:
            self._inbox.put_nowait(_Closed("closed locally"))
            raise
        finally:
            self._finished.set()

    async def send(self, frame: Frame) -> None:
        if self._closed or self._writer.is_closing():
            raise LinkError(self.peer_id, f"link to '{self.peer_id}' is closed")
        try:
            self._writer.write(frame.encode())
            await self._writer.drain()
        except (ConnectionError, OSError, RuntimeError) as exc:
            raise LinkError(self.peer_id, f"send to '{self.peer_id}' failed: {exc!r}")
        self._count_sent(frame)

    async def recv(self, timeout: Optional[float] = None) -> Frame:
        try:
            item = await queue_get(self._inbox, timeout)
        except asyncio.TimeoutError:
            raise LinkTimeout(self.peer_id, timeout) from None
        if isinstance(item, _Closed):
            self._inbox.put_nowait(item)
            raise LinkError(self.peer_id, f"link to '{self.peer_id}' {item.reason}")
        return item

    async def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._on_close is not None:
            self._on_close(self)
        self._pump_task.cancel()
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            pass

    async def wait_finished(self) -> None:
        await self._finished.wait()


class TcpTransport(Transport):
    """Transport over real sockets.

    Args:
        node_id: This node's id.
        host: Interface to listen on.
        port: Port to listen on; 0 picks a free port.
        connect_timeout: Seconds to wait for a dial or handshake.
    """

    def __init__(
        self,
        node_id: str,
        host: str = "127.0.0.1",
        port: int = 0,
        connect_timeout: float = 5.0,
    ):
        super().__init__(node_id)
        self.host = host
        self.port = port
        self.connect_timeout = connect_timeout
        self._server: Optional[asyncio.AbstractServer] = None
        self._links: List[TcpLink] = []

    @property
    def address(self) -> PeerAddr:
        return PeerAddr(self.node_id, self.host, self.port)

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._on_connection, self.host, self.port
        )
        sockets = self._server.sockets or []
        if sockets:
            self.port = sockets[0].getsockname()[1]
        logger.info(f"{self.node_id}: listening on {self.host}:{self.port}")

    async def stop(self) -> None:
        for link in list(self._links):
            await link.close()
        self._links.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def _on_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        try:
            header = await asyncio.wait_for(
                reader.readexactly(FRAME_HEADER.size), self.connect_timeout
            )
            length, kind = parse_header(header)
            if kind != FrameKind.HELLO:
                raise DecodeError(f"expected HELLO, got {kind.name}")
            payload = await asyncio.wait_for(
                reader.readexactly(length), self.connect_timeout
            )
            hello = Hello.model_validate_json(payload)
        except Exception as exc:
            logger.warning(f"{self.node_id}: rejected inbound connection: {exc!r}")
            writer.close()
            return
        link = TcpLink(
            hello.node_id, hello.channel, reader, writer, self.counters, self._forget
        )
        self._links.append(link)
        self._deliver_incoming(link)
        # The stream pair belongs to this handler until the link is done.
        await link.wait_finished()
        self._forget(link)

    async def connect(
        self, addr: PeerAddr, channel: str, timeout: Optional[float] = None
    ) -> Link:
        limit = timeout if timeout is not None else self.connect_timeout
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(addr.host, addr.port), limit
            )
        except (OSError, asyncio.TimeoutError) as exc:
            raise LinkError(
                addr.node_id,
                f"cannot reach '{addr.node_id}' at {addr.endpoint}: {exc!r}",
            ) from exc
        hello = Hello(node_id=self.node_id, channel=channel)
        link = TcpLink(
            addr.node_id, channel, reader, writer, self.counters, self._forget
        )
        await link.send(Frame(FrameKind.HELLO, hello.model_dump_json().encode("utf-8")))
        self._links.append(link)
        return link

    def _forget(self, link: TcpLink) -> None:
        if link in self._links:
            self._links.remove(link)

    async def run_codec(self, fn: Callable[..., T], *args: Any, nbytes: int = 0) -> T:
        return await asyncio.to_thread(fn, *args)

    async def compute(self, seconds: float) -> None:
        # Real compute already took real time.
        await asyncio.sleep(0)
