# src/core/transport/sim.py

"""Deterministic in-process network simulator.

The simulator runs the same protocol coroutines as the TCP transport, on a
:class:`VirtualClockLoop`: an asyncio event loop whose clock only moves when
every task is blocked, jumping straight to the next scheduled timer. A
2-second heartbeat therefore costs no wall time, and identical inputs give
identical timestamps and delivery order on every run.

Bandwidth model: each directed node pair has one pipe shared by every
channel between them. A frame starts transmitting once the pipe is free,
occupies it for ``8 * wire_size / bandwidth`` seconds, and arrives one
latency after it finishes. The sender is held for the transmit time.
"""

import asyncio
import logging
import selectors
from collections.abc import Mapping
from typing import (
    Any,
    Awaitable,
    Callable,
    Dict,
    Iterator,
    List,
    Literal,
    Optional,
    Set,
    Tuple,
    TypeVar,
    Union,
)

from pydantic import BaseModel, Field, field_validator, model_validator

from src.core.errors import LinkError, LinkTimeout, SimulationDeadlock
from src.core.transport.base import (
    Link,
    PeerAddr,
    TrafficCounters,
    Transport,
    queue_get,
)
from src.core.transport.frames import Frame

logger = logging.getLogger(__name__)

T = TypeVar("T")


# ---------------------------------------------------------------------------
# Link specifications
# ---------------------------------------------------------------------------


class LinkFault(BaseModel):
    """A scripted change to a link at simulated time ``at``."""

    at: float = Field(..., ge=0, description="Simulated time in seconds")
    action: Literal["drop", "degrade"] = Field(..., description="What happens")
    bandwidth_bps: Optional[float] = Field(
        default=None, gt=0, description="New bandwidth for 'degrade'"
    )

    @model_validator(mode="after")
    def _degrade_needs_bandwidth(self) -> "LinkFault":
        if self.action == "degrade" and self.bandwidth_bps is None:
            raise ValueError("degrade faults need bandwidth_bps")
        return self


class LinkSpec(BaseModel):
    """Bandwidth, latency and fault schedule of a simulated link."""

    bandwidth_bps: float = Field(default=1e9, gt=0, description="Bits per second")
    latency_ms: float = Field(default=0.0, ge=0, description="One-way latency")
    faults: List[LinkFault] = Field(default_factory=list)

    @field_validator("faults")
    @classmethod
    def _ordered(cls, faults: List[LinkFault]) -> List[LinkFault]:
        times = [f.at for f in faults]
        if times != sorted(times):
            raise ValueError("fault times must be nondecreasing")
        return faults

    @property
    def latency_s(self) -> float:
        return self.latency_ms / 1000.0

    def bandwidth_at(self, t: float) -> float:
        bandwidth = self.bandwidth_bps
        for fault in self.faults:
            if fault.at <= t and fault.action == "degrade":
                bandwidth = float(fault.bandwidth_bps)  # type: ignore[arg-type]
        return bandwidth

    def drop_time(self) -> Optional[float]:
        drops = [f.at for f in self.faults if f.action == "drop"]
        return min(drops) if drops else None

    def dropped_at(self, t: float) -> bool:
        drop = self.drop_time()
        return drop is not None and drop <= t


# ---------------------------------------------------------------------------
# Virtual clock event loop
# ---------------------------------------------------------------------------


class _KeyMap(Mapping):
    def __init__(self, selector: "_VirtualSelector"):
        self._selector = selector

    def __getitem__(self, fileobj: Any) -> selectors.SelectorKey:
        return self._selector._keys[self._selector._fd(fileobj)]

    def __iter__(self) -> Iterator[int]:
        return iter(self._selector._keys)

    def __len__(self) -> int:
        return len(self._selector._keys)


class _VirtualSelector(selectors.BaseSelector):
    """Selector with no real I/O; waiting for ``timeout`` advances the clock."""

    def __init__(self, loop: "VirtualClockLoop"):
        self._loop = loop
        self._keys: Dict[int, selectors.SelectorKey] = {}

    @staticmethod
    def _fd(fileobj: Any) -> int:
        return fileobj if isinstance(fileobj, int) else int(fileobj.fileno())

    def register(
        self, fileobj: Any, events: int, data: Any = None
    ) -> selectors.SelectorKey:
        fd = self._fd(fileobj)
        if fd in self._keys:
            raise KeyError(f"{fileobj!r} is already registered")
        key = selectors.SelectorKey(fileobj, fd, events, data)
        self._keys[fd] = key
        return key

    def unregister(self, fileobj: Any) -> selectors.SelectorKey:
        return self._keys.pop(self._fd(fileobj))

    def modify(
        self, fileobj: Any, events: int, data: Any = None
    ) -> selectors.SelectorKey:
        fd = self._fd(fileobj)
        key = self._keys[fd]._replace(events=events, data=data)
        self._keys[fd] = key
        return key

    def select(
        self, timeout: Optional[float] = None
    ) -> List[Tuple[selectors.SelectorKey, int]]:
        if timeout is None:
            raise SimulationDeadlock(
                f"no runnable tasks and no timers at t={self._loop.time():.6f}"
            )
        if timeout > 0:
            self._loop._advance(timeout)
        return []

    def close(self) -> None:
        self._keys.clear()

    def get_map(self) -> Mapping:
        return _KeyMap(self)


class VirtualClockLoop(asyncio.SelectorEventLoop):
    """Event loop whose ``time()`` is simulated seconds starting at 0.

    Args:
        time_limit: Raise :class:`SimulationDeadlock` once the clock passes
            this many seconds (guards against runaway periodic tasks).
    """

    def __init__(self, time_limit: Optional[float] = None):
        self._virtual_now = 0.0
        self._time_limit = time_limit
        super().__init__(selector=_VirtualSelector(self))

    def time(self) -> float:
        return self._virtual_now

    def _advance(self, seconds: float) -> None:
        self._virtual_now += seconds
        if self._time_limit is not None and self._virtual_now > self._time_limit:
            raise SimulationDeadlock(
                f"simulated time passed the limit of {self._time_limit}s"
            )


def run_simulation(
    main: Union[Awaitable[T], Callable[[], Awaitable[T]]],
    time_limit: Optional[float] = 1e7,
) -> T:
    """Run ``main`` to completion on a fresh :class:`VirtualClockLoop`.

    Leftover tasks (heartbeat loops, servers) are cancelled afterwards.
    """
    loop = VirtualClockLoop(time_limit=time_limit)
    try:
        coro = main() if callable(main) else main
        return loop.run_until_complete(coro)
    finally:
        try:
            _cancel_leftovers(loop)
        finally:
            loop.close()


def _cancel_leftovers(loop: VirtualClockLoop) -> None:
    pending = [task for task in asyncio.all_tasks(loop) if not task.done()]
    if not pending:
        return
    for task in pending:
        task.cancel()
    try:
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
    except SimulationDeadlock as exc:
        logger.warning(f"tasks did not finish after cancellation: {exc}")


# ---------------------------------------------------------------------------
# Simulated network
# ---------------------------------------------------------------------------


def pair_key(a: str, b: str) -> Tuple[str, str]:
    return (a, b) if a <= b else (b, a)


class _Pipe:
    def __init__(self) -> None:
        self.busy_until = 0.0
        self.last_arrival = 0.0


class _PeerClosed:
    def __init__(self, reason: str):
        self.reason = reason


class SimLink(Link):
    def __init__(
        self,
        network: "SimNetwork",
        local: str,
        peer: str,
        channel: str,
        counters: TrafficCounters,
    ):
        super().__init__(peer, channel, counters)
        self.local_id = local
        self._network = network
        self._inbox: "asyncio.Queue[Union[Frame, _PeerClosed]]" = asyncio.Queue()
        self._remote: Optional["SimLink"] = None
        self._closed = False
        self._broken: Optional[str] = None

    async def send(self, frame: Frame) -> None:
        net = self._network
        loop = asyncio.get_running_loop()
        now = loop.time()
        if self._closed:
            raise LinkError(self.peer_id, f"link to '{self.peer_id}' is closed")
        if self._broken is None and not net.path_up(self.local_id, self.peer_id, now):
            net.break_pair(self.local_id, self.peer_id, "link dropped")
        if self._broken is not None:
            raise LinkError(self.peer_id, f"link to '{self.peer_id}' {self._broken}")
        remote = self._remote
        assert remote is not None
        done, arrival = net.reserve(self.local_id, self.peer_id, frame.wire_size, now)
        loop.call_at(arrival, remote._arrive, frame)
        self._count_sent(frame)
        if done > now:
            await asyncio.sleep(done - now)

    def _arrive(self, item: Union[Frame, _PeerClosed]) -> None:
        if self._broken is not None or self._closed:
            return
        if isinstance(item, Frame):
            self._count_received(item)
        self._inbox.put_nowait(item)

    async def recv(self, timeout: Optional[float] = None) -> Frame:
        try:
            item = await queue_get(self._inbox, timeout)
        except asyncio.TimeoutError:
            raise LinkTimeout(self.peer_id, timeout) from None
        if isinstance(item, _PeerClosed):
            self._inbox.put_nowait(item)
            raise LinkError(self.peer_id, f"link to '{self.peer_id}' {item.reason}")
        return item

    async def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._network.forget(self)
        remote = self._remote
        if remote is not None and self._broken is None:
            loop = asyncio.get_running_loop()
            when = self._network.close_arrival(self.local_id, self.peer_id, loop.time())
            loop.call_at(when, remote._arrive, _PeerClosed("closed by peer"))

    def _break(self, reason: str) -> None:
        if self._broken is not None or self._closed:
            return
        self._broken = reason
        self._inbox.put_nowait(_PeerClosed(reason))


class SimTransport(Transport):
    """One node's endpoint on a :class:`SimNetwork`."""

    def __init__(self, network: "SimNetwork", node_id: str):
        super().__init__(node_id)
        self._network = network

    @property
    def address(self) -> PeerAddr:
        return PeerAddr(self.node_id)

    @property
    def network(self) -> "SimNetwork":
        return self._network

    async def start(self) -> None:
        self._network.arm()

    async def stop(self) -> None:
        self._network.detach(self.node_id, "transport stopped")

    async def connect(
        self, addr: PeerAddr, channel: str, timeout: Optional[float] = None
    ) -> Link:
        net = self._network
        loop = asyncio.get_running_loop()
        now = loop.time()
        peer = addr.node_id
        if not net.is_up(self.node_id):
            raise LinkError(peer, f"'{self.node_id}' is down")
        target = net.transport(peer)
        if target is None or not net.path_up(self.node_id, peer, now):
            raise LinkError(peer, f"'{peer}' is unreachable from '{self.node_id}'")
        local = SimLink(net, self.node_id, peer, channel, self.counters)
        remote = SimLink(net, peer, self.node_id, channel, target.counters)
        local._remote, remote._remote = remote, local
        net.track(local, remote)
        latency = net.spec(self.node_id, peer).latency_s
        loop.call_at(now + latency, target._offer, remote)
        if latency > 0:
            await asyncio.sleep(latency)
        return local

    def _offer(self, link: SimLink) -> None:
        if self._network.is_up(self.node_id) and link._broken is None:
            self._deliver_incoming(link)

    async def run_codec(self, fn: Callable[..., T], *args: Any, nbytes: int = 0) -> T:
        rate = self._network.codec_bytes_per_second
        if rate and nbytes > 0:
            await asyncio.sleep(nbytes / rate)
        return fn(*args)

    async def compute(self, seconds: float) -> None:
        if seconds > 0:
            await asyncio.sleep(seconds)


class SimNetwork:
    """All simulated nodes, links and scripted faults of one run.

    Args:
        default: Spec for every pair without an explicit entry.
        links: Per-pair specs keyed by unordered node-id pairs.
        codec_bytes_per_second: Modeled quantize/dequantize throughput;
            ``None`` makes codec work free.
    """

    def __init__(
        self,
        default: Optional[LinkSpec] = None,
        links: Optional[Dict[Tuple[str, str], LinkSpec]] = None,
        codec_bytes_per_second: Optional[float] = None,
    ):
        self.default = default or LinkSpec()
        self._links = {pair_key(a, b): spec for (a, b), spec in (links or {}).items()}
        self.codec_bytes_per_second = codec_bytes_per_second
        self._transports: Dict[str, SimTransport] = {}
        self._down: Set[str] = set()
        self._pipes: Dict[Tuple[str, str], _Pipe] = {}
        self._open: Dict[Tuple[str, str], List[SimLink]] = {}
        self._bandwidth_overrides: Dict[Tuple[str, str], float] = {}
        self._armed_pairs: Set[Tuple[str, str]] = set()

    # Membership of the simulated world -------------------------------------

    def attach(self, node_id: str) -> SimTransport:
        if node_id in self._transports and node_id not in self._down:
            raise ValueError(f"node '{node_id}' is already attached")
        self._down.discard(node_id)
        transport = SimTransport(self, node_id)
        self._transports[node_id] = transport
        return transport

    def transport(self, node_id: str) -> Optional[SimTransport]:
        if node_id in self._down:
            return None
        return self._transports.get(node_id)

    def is_up(self, node_id: str) -> bool:
        return node_id in self._transports and node_id not in self._down

    def crash(self, node_id: str) -> None:
        """Silence a node: its links break and it becomes unreachable."""
        if node_id in self._down:
            return
        logger.info(f"sim: node '{node_id}' crashed at t={_now():.3f}")
        self.detach(node_id, "peer crashed")

    def detach(self, node_id: str, reason: str) -> None:
        self._down.add(node_id)
        self.close_links_of(node_id, reason)

    # Link properties --------------------------------------------------------

    def spec(self, a: str, b: str) -> LinkSpec:
        return self._links.get(pair_key(a, b), self.default)

    def set_link(self, a: str, b: str, spec: LinkSpec) -> None:
        self._links[pair_key(a, b)] = spec

    def set_bandwidth(self, a: str, b: str, bandwidth_bps: float) -> None:
        """Degrade (or restore) a pair's bandwidth from now on."""
        self._bandwidth_overrides[pair_key(a, b)] = bandwidth_bps
        logger.info(f"sim: link {a}<->{b} set to {bandwidth_bps:.3g} b/s")

    def bandwidth(self, a: str, b: str, t: float) -> float:
        override = self._bandwidth_overrides.get(pair_key(a, b))
        if override is not None:
            return override
        return self.spec(a, b).bandwidth_at(t)

    def path_up(self, a: str, b: str, t: float) -> bool:
        return self.is_up(a) and self.is_up(b) and not self.spec(a, b).dropped_at(t)

    # Transmission -----------------------------------------------------------

    def reserve(
        self, src: str, dst: str, nbytes: int, now: float
    ) -> Tuple[float, float]:
        """Book ``nbytes`` on the src->dst pipe; return ``(done, arrival)``."""
        pipe = self._pipes.setdefault((src, dst), _Pipe())
        start = max(now, pipe.busy_until)
        done = start + nbytes * 8.0 / self.bandwidth(src, dst, start)
        pipe.busy_until = done
        arrival = max(done + self.spec(src, dst).latency_s, pipe.last_arrival)
        pipe.last_arrival = arrival
        return done, arrival

    def close_arrival(self, src: str, dst: str, now: float) -> float:
        pipe = self._pipes.get((src, dst))
        latest = pipe.last_arrival if pipe is not None else 0.0
        return max(now + self.spec(src, dst).latency_s, latest)

    # Link bookkeeping -------------------------------------------------------

    def arm(self) -> None:
        """Schedule scripted drops for explicitly configured pairs."""
        for pair, spec in self._links.items():
            self._arm_pair(pair, spec)

    def _arm_pair(self, pair: Tuple[str, str], spec: LinkSpec) -> None:
        drop = spec.drop_time()
        if drop is None or pair in self._armed_pairs:
            return
        self._armed_pairs.add(pair)
        loop = asyncio.get_running_loop()
        loop.call_at(
            max(drop, loop.time()), self.break_pair, pair[0], pair[1], "link dropped"
        )

    def track(self, local: SimLink, remote: SimLink) -> None:
        pair = pair_key(local.local_id, remote.local_id)
        self._open.setdefault(pair, []).extend([local, remote])
        self._arm_pair(pair, self.spec(*pair))

    def forget(self, link: SimLink) -> None:
        pair = pair_key(link.local_id, link.peer_id)
        links = self._open.get(pair)
        if links and link in links:
            links.remove(link)

    def break_pair(self, a: str, b: str, reason: str) -> None:
        for link in list(self._open.get(pair_key(a, b), [])):
            link._break(reason)
        self._open.pop(pair_key(a, b), None)

    def close_links_of(self, node_id: str, reason: str) -> None:
        for pair in sorted(self._open):
            if node_id in pair:
                self.break_pair(pair[0], pair[1], reason)


def _now() -> float:
    try:
        return asyncio.get_running_loop().time()
    except RuntimeError:
        return 0.0
