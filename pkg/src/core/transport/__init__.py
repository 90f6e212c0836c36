"""Framed links over real TCP or a deterministic simulated network."""

from .base import Link, PeerAddr, TrafficCounters, Transport, queue_get
from .frames import (
    MAX_PAYLOAD,
    Frame,
    FrameKind,
    Hello,
    decode_frame,
    pack_message,
    unpack_message,
)
from .probe import measure_bandwidth, probe_peers, serve_probes
from .sim import (
    LinkFault,
    LinkSpec,
    SimNetwork,
    SimTransport,
    VirtualClockLoop,
    run_simulation,
)
from .tcp import TcpTransport

__all__ = [
    # Links and transports
    "Link",
    "PeerAddr",
    "TrafficCounters",
    "Transport",
    "TcpTransport",
    "SimTransport",
    "queue_get",
    # Frames
    "MAX_PAYLOAD",
    "Frame",
    "FrameKind",
    "Hello",
    "decode_frame",
    "pack_message",
    "unpack_message",
    # Simulation
    "LinkFault",
    "LinkSpec",
    "SimNetwork",
    "VirtualClockLoop",
    "run_simulation",
    # Probing
    "measure_bandwidth",
    "probe_peers",
    "serve_probes",
]
