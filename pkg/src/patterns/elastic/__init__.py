"""
Elastic Mesh

Membership for a training mesh whose nodes come and go.

Key Features:
- Coordinator with a versioned key-value store, heartbeats and deathrattles
- Joins and graceful leaves committed at outer-step barriers, evictions at once
- Epoch-stamped ranks and ring order
- Checkpoint transfer from donors with integrity checks
"""

from .checkpoint import (
    CHECKPOINT_CHANNEL,
    Checkpoint,
    checkpoint_path,
    config_hash,
    fetch_checkpoint,
    latest_checkpoint_file,
    load_checkpoint_file,
    save_checkpoint_file,
    saved_steps,
    serve_checkpoints,
)
from .coordinator import HEARTBEAT_CHANNEL, STATE_KEY, Coordinator
from .join import JoinResult, join_blocking, join_mesh, join_nonblocking
from .kvstore import KV_CHANNEL, KeyValueStore, KVClient, KVServer
from .membership import MeshClient
from .mesh_state import JoinAssignment, JoinMode, MemberInfo, MeshState
from .settings import MeshSettings

__all__ = [
    "CHECKPOINT_CHANNEL",
    "HEARTBEAT_CHANNEL",
    "KV_CHANNEL",
    "STATE_KEY",
    "Checkpoint",
    "Coordinator",
    "JoinAssignment",
    "JoinMode",
    "JoinResult",
    "KVClient",
    "KVServer",
    "KeyValueStore",
    "MemberInfo",
    "MeshClient",
    "MeshSettings",
    "MeshState",
    "checkpoint_path",
    "config_hash",
    "fetch_checkpoint",
    "join_blocking",
    "join_mesh",
    "join_nonblocking",
    "latest_checkpoint_file",
    "load_checkpoint_file",
    "save_checkpoint_file",
    "saved_steps",
    "serve_checkpoints",
]
