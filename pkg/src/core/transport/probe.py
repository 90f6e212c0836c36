# src/core/transport/probe.py

"""Point-to-point bandwidth probing.

A probe times two round trips over one link: a small ``PROBE`` frame and a
large one, each answered by an empty ``PROBE_ACK``. Latency and the ack
cost appear in both round trips, so the difference in elapsed time is the
transmit time of the extra bytes alone.
"""

import asyncio
import logging
from typing import Dict, List, Optional, Set

from src.core.errors import LinkError
from src.core.transport.base import Link, PeerAddr, Transport, link_error_from
from src.core.transport.frames import Frame, FrameKind

logger = logging.getLogger(__name__)

PROBE_CHANNEL = "probe"
SMALL_PROBE_BYTES = 16 * 1024
LARGE_PROBE_BYTES = 1024 * 1024
_MIN_ELAPSED = 1e-9


async def _round_trip(link: Link, nbytes: int, timeout: Optional[float]) -> float:
    loop = asyncio.get_running_loop()
    start = loop.time()
    await link.send(Frame(FrameKind.PROBE, bytes(nbytes)))
    reply = await link.recv(timeout)
    if reply.kind != FrameKind.PROBE_ACK:
        raise LinkError(link.peer_id, f"expected PROBE_ACK, got {reply.kind.name}")
    return loop.time() - start


async def measure_bandwidth(
    transport: Transport,
    peer: PeerAddr,
    small_bytes: int = SMALL_PROBE_BYTES,
    large_bytes: int = LARGE_PROBE_BYTES,
    timeout: Optional[float] = 30.0,
) -> float:
    """Estimate the bandwidth to ``peer`` in bits per second.

    Raises:
        LinkError: If the peer is unreachable or the link drops.
        LinkTimeout: If an acknowledgement does not arrive in time.
    """
    if not 0 <= small_bytes < large_bytes:
        raise ValueError("probe sizes must satisfy 0 <= small < large")
    link = await transport.connect(peer, PROBE_CHANNEL, timeout)
    try:
        small = await _round_trip(link, small_bytes, timeout)
        large = await _round_trip(link, large_bytes, timeout)
    finally:
        await link.close()
    elapsed = large - small
    if elapsed <= 0:
        # Real clocks can be noisier than the transfer; fall back to one trip.
        elapsed = large
    bandwidth = 8.0 * (large_bytes - small_bytes) / max(elapsed, _MIN_ELAPSED)
    logger.debug(f"{transport.node_id}: probe to {peer.node_id} = {bandwidth:.4g} b/s")
    return bandwidth


async def _answer(link: Link) -> None:
    try:
        while True:
            frame = await link.recv()
            if frame.kind == FrameKind.PROBE:
                await link.send(Frame(FrameKind.PROBE_ACK))
    except LinkError:
        pass
    finally:
        await link.close()


async def serve_probes(transport: Transport) -> None:
    """Answer probes from any peer until cancelled."""
    handlers: Set["asyncio.Task[None]"] = set()
    try:
        while True:
            link = await transport.accept(PROBE_CHANNEL)
            task = asyncio.ensure_future(_answer(link))
            handlers.add(task)
            task.add_done_callback(handlers.discard)
    finally:
        for task in list(handlers):
            task.cancel()


async def probe_peers(
    transport: Transport,
    peers: List[PeerAddr],
    floor_bps: float,
    timeout: Optional[float] = 30.0,
) -> Dict[str, float]:
    """Measure every peer in turn; failed probes report ``floor_bps``."""
    row: Dict[str, float] = {}
    for peer in peers:
        if peer.node_id == transport.node_id:
            continue
        try:
            row[peer.node_id] = await measure_bandwidth(
                transport, peer, timeout=timeout
            )
        except (LinkError, TimeoutError) as exc:
            error = link_error_from(exc, peer.node_id)
            logger.warning(f"{transport.node_id}: probe failed, using floor: {error}")
            row[peer.node_id] = floor_bps
    return row
