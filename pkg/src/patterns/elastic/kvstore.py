# src/patterns/elastic/kvstore.py

"""Versioned key-value store served by the coordinator.

Requests travel as ``KV_OP`` frames and answers as ``KV_REPLY`` frames on
the ``kv`` channel; both carry a JSON header and an opaque byte body
(see :func:`pack_message`). Besides ``set``/``get``/``wait`` the server
dispatches any op a coordinator registers, so membership calls share the
same plumbing.
"""

import asyncio
import logging
from typing import (
    Any,
    Awaitable,
    Callable,
    Dict,
    List,
    Optional,
    Set,
    Tuple,
    Type,
)

from pydantic import BaseModel, Field

from src.core.errors import (
    CoordinatorError,
    FatalTrainingError,
    JoinRefused,
    KVTimeout,
    LinkError,
    LinkTimeout,
    MeshError,
)
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

KV_CHANNEL = "kv"

# Error classes that survive the trip to the client under a stable code.
_ERROR_CODES: Dict[str, Type[MeshError]] = {
    "timeout": KVTimeout,
    "refused": JoinRefused,
    "fatal": FatalTrainingError,
}


class KVRequest(BaseModel):
    op: str
    node_id: str = ""
    key: str = ""
    version: int = Field(default=0, ge=0, description="Last version the caller saw")
    timeout: Optional[float] = Field(default=None, ge=0)
    args: Dict[str, Any] = Field(default_factory=dict)


class KVReply(BaseModel):
    ok: bool = True
    found: bool = False
    version: int = 0
    code: Optional[str] = None
    error: Optional[str] = None
    result: Dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def failure(cls, exc: MeshError) -> "KVReply":
        code = "error"
        for name, error_type in _ERROR_CODES.items():
            if isinstance(exc, error_type):
                code = name
                break
        return cls(ok=False, code=code, error=str(exc))

    def raise_for_error(self, op: str) -> None:
        if self.ok:
            return
        error_type = _ERROR_CODES.get(self.code or "")
        if error_type is not None:
            raise error_type(self.error or op)
        raise CoordinatorError(f"coordinator rejected '{op}': {self.error}")


Handler = Callable[[KVRequest, bytes], Awaitable[Tuple[KVReply, bytes]]]


class ChangeSignal:
    """Wakes every waiter whenever :meth:`notify` is called."""

    def __init__(self) -> None:
        self._event: Optional[asyncio.Event] = None

    def notify(self) -> None:
        if self._event is not None:
            self._event.set()
            self._event = None

    async def wait_for(
        self, predicate: Callable[[], bool], timeout: Optional[float] = None
    ) -> bool:
        """Block until ``predicate()`` holds; False if ``timeout`` expires first."""
        loop = asyncio.get_running_loop()
        deadline = None if timeout is None else loop.time() + timeout
        while not predicate():
            if self._event is None:
                self._event = asyncio.Event()
            event = self._event
            remaining = None if deadline is None else deadline - loop.time()
            if remaining is not None and remaining <= 0:
                return False
            try:
                await asyncio.wait_for(event.wait(), remaining)
            except asyncio.TimeoutError:
                return predicate()
        return True


class KeyValueStore:
    """In-memory store; every ``set`` bumps the key's version by one."""

    def __init__(self) -> None:
        self._data: Dict[str, Tuple[int, bytes]] = {}
        self.changed = ChangeSignal()

    def set(self, key: str, value: bytes) -> int:
        version = self._data.get(key, (0, b""))[0] + 1
        self._data[key] = (version, bytes(value))
        self.changed.notify()
        return version

    def get(self, key: str) -> Tuple[Optional[bytes], int]:
        if key not in self._data:
            return None, 0
        version, value = self._data[key]
        return value, version

    def keys(self, prefix: str = "") -> List[str]:
        return sorted(key for key in self._data if key.startswith(prefix))

    async def wait_newer(
        self, key: str, version: int, timeout: Optional[float] = None
    ) -> Tuple[bytes, int]:
        """Wait until ``key`` has a version greater than ``version``.

        Raises:
            KVTimeout: If no newer value appears within ``timeout`` seconds.
        """
        newer = await self.changed.wait_for(
            lambda: self.get(key)[1] > version, timeout
        )
        if not newer:
            raise KVTimeout(
                f"no update to '{key}' past version {version} in {timeout}s"
            )
        value, current = self.get(key)
        assert value is not None
        return value, current


class KVServer:
    """Answers ``KV_OP`` frames on one transport."""

    def __init__(
        self, transport: Transport, store: KeyValueStore, channel: str = KV_CHANNEL
    ):
        self.transport = transport
        self.store = store
        self.channel = channel
        self._handlers: Dict[str, Handler] = {
            "set": self._set,
            "get": self._get,
            "wait": self._wait,
        }

    def register(self, op: str, handler: Handler) -> None:
        self._handlers[op] = handler

    async def _set(self, request: KVRequest, body: bytes) -> Tuple[KVReply, bytes]:
        version = self.store.set(request.key, body)
        return KVReply(found=True, version=version), b""

    async def _get(self, request: KVRequest, body: bytes) -> Tuple[KVReply, bytes]:
        value, version = self.store.get(request.key)
        return KVReply(found=value is not None, version=version), value or b""

    async def _wait(self, request: KVRequest, body: bytes) -> Tuple[KVReply, bytes]:
        value, version = await self.store.wait_newer(
            request.key, request.version, request.timeout
        )
        return KVReply(found=True, version=version), value

    async def dispatch(self, request: KVRequest, body: bytes) -> Tuple[KVReply, bytes]:
        handler = self._handlers.get(request.op)
        if handler is None:
            error = f"unknown op '{request.op}'"
            return KVReply(ok=False, code="error", error=error), b""
        try:
            return await handler(request, body)
        except MeshError as exc:
            logger.debug(f"kv op '{request.op}' from '{request.node_id}' failed: {exc}")
            return KVReply.failure(exc), b""

    async def _session(self, link: Link) -> None:
        try:
            while True:
                frame = await link.recv()
                if frame.kind != FrameKind.KV_OP:
                    logger.warning(f"ignoring {frame.kind.name} frame on kv channel")
                    continue
                request, body = unpack_message(frame.payload, KVRequest)
                reply, data = await self.dispatch(request, body)
                await link.send(Frame(FrameKind.KV_REPLY, pack_message(reply, data)))
        except (LinkError, MeshError) as exc:
            logger.debug(f"kv session with '{link.peer_id}' ended: {exc}")
        finally:
            await link.close()

    async def serve(self) -> None:
        """Accept kv clients until cancelled."""
        sessions: Set["asyncio.Task[None]"] = set()
        try:
            while True:
                link = await self.transport.accept(self.channel)
                task = asyncio.ensure_future(self._session(link))
                sessions.add(task)
                task.add_done_callback(sessions.discard)
        finally:
            for task in list(sessions):
                task.cancel()


class KVClient:
    """Client half of the store.

    Each outstanding request holds its own link, so a long ``wait`` never
    blocks a concurrent ``set`` from the same node.

    Args:
        transport: This node's transport.
        coordinator: Where the store is served.
        op_timeout: Seconds to wait for a reply beyond any server-side wait.
    """

    def __init__(
        self,
        transport: Transport,
        coordinator: PeerAddr,
        op_timeout: Optional[float] = 30.0,
        channel: str = KV_CHANNEL,
    ):
        self.transport = transport
        self.coordinator = coordinator
        self.op_timeout = op_timeout
        self.channel = channel
        self._idle: List[Link] = []

    async def _link(self) -> Link:
        if self._idle:
            return self._idle.pop()
        try:
            return await self.transport.connect(
                self.coordinator, self.channel, self.op_timeout
            )
        except LinkError as exc:
            raise CoordinatorError(f"coordinator unreachable: {exc}") from exc

    async def call(
        self,
        op: str,
        key: str = "",
        body: bytes = b"",
        version: int = 0,
        timeout: Optional[float] = None,
        wait: bool = False,
        **args: Any,
    ) -> Tuple[KVReply, bytes]:
        """Send one request and return the coordinator's reply.

        ``wait`` marks ops the server may hold open; their reply deadline is
        ``timeout`` plus ``op_timeout``, or unbounded without a ``timeout``.

        Raises:
            CoordinatorError: If the coordinator is unreachable or lost.
            KVTimeout, JoinRefused, FatalTrainingError: Relayed from the
                server.
        """
        request = KVRequest(
            op=op,
            node_id=self.transport.node_id,
            key=key,
            version=version,
            timeout=timeout,
            args=args,
        )
        if not wait:
            reply_timeout = self.op_timeout
        elif timeout is None or self.op_timeout is None:
            reply_timeout = None
        else:
            reply_timeout = timeout + self.op_timeout

        link = await self._link()
        try:
            await link.send(Frame(FrameKind.KV_OP, pack_message(request, body)))
            frame = await link.recv(reply_timeout)
            reply, data = unpack_message(frame.payload, KVReply)
        except (LinkError, LinkTimeout) as exc:
            await link.close()
            raise CoordinatorError(f"kv '{op}' failed: {exc}") from exc
        except BaseException:
            await link.close()
            raise
        self._idle.append(link)
        reply.raise_for_error(op)
        return reply, data

    async def kv_set(self, key: str, value: bytes) -> int:
        reply, _ = await self.call("set", key, value)
        return reply.version

    async def kv_get(self, key: str) -> Tuple[Optional[bytes], int]:
        reply, data = await self.call("get", key)
        return (data if reply.found else None), reply.version

    async def kv_wait(
        self,
        key: str,
        predicate: Callable[[Optional[bytes]], bool],
        timeout: Optional[float] = None,
    ) -> Optional[bytes]:
        """Return the value of ``key`` once ``predicate`` accepts it.

        Raises:
            KVTimeout: If the predicate still fails after ``timeout`` seconds.
        """
        loop = asyncio.get_running_loop()
        deadline = None if timeout is None else loop.time() + timeout
        value, version = await self.kv_get(key)
        while not predicate(value):
            remaining = None if deadline is None else deadline - loop.time()
            if remaining is not None and remaining <= 0:
                raise KVTimeout(
                    f"'{key}' did not reach the expected value in {timeout}s"
                )
            reply, data = await self.call(
                "wait", key, version=version, timeout=remaining, wait=True
            )
            value, version = data, reply.version
        return value

    async def close(self) -> None:
        while self._idle:
            await self._idle.pop().close()
