# src/patterns/elastic/mesh_state.py

"""Wire models of mesh membership shared by coordinator and workers."""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from src.core.errors import StructuralError
from src.core.transport import PeerAddr
from src.patterns.collectives import RingPlan

JoinMode = Literal["founder", "blocking", "nonblocking"]


class MemberInfo(BaseModel):
    """One admitted node."""

    node_id: str = Field(..., description="Unique node id")
    rank: int = Field(..., ge=0, description="Global rank, contiguous from 0")
    host: str = Field(default="sim", description="Endpoint host")
    port: int = Field(default=0, ge=0, description="Endpoint port")
    shard_id: int = Field(..., ge=0, description="Data shard, stable across re-ranks")
    joined_step: int = Field(..., ge=0, description="First outer step this node runs")
    join_mode: JoinMode = Field(default="founder", description="How the node entered")

    @property
    def addr(self) -> PeerAddr:
        return PeerAddr(self.node_id, self.host, self.port)


class MeshState(BaseModel):
    """Epoch-versioned membership, ranks and ring order."""

    epoch: int = Field(default=0, ge=0, description="Bumped on membership change")
    members: List[MemberInfo] = Field(default_factory=list)
    ring: List[str] = Field(default_factory=list, description="Ids in ring order")
    joining: List[str] = Field(default_factory=list, description="Still syncing")
    outer_step: int = Field(default=0, ge=0, description="Last committed barrier step")
    halted: bool = Field(default=False)
    halt_reason: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self) -> "MeshState":
        ranks = sorted(m.rank for m in self.members)
        if ranks != list(range(len(self.members))):
            raise ValueError(f"ranks must be 0..k-1, got {ranks}")
        ids = [m.node_id for m in self.members]
        if sorted(self.ring) != sorted(ids):
            raise ValueError(f"ring {self.ring} is not a permutation of members {ids}")
        if not set(self.joining) <= set(ids):
            raise ValueError("joining nodes must be members")
        return self

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def member_ids(self) -> List[str]:
        return [m.node_id for m in sorted(self.members, key=lambda m: m.rank)]

    def member(self, node_id: str) -> Optional[MemberInfo]:
        for m in self.members:
            if m.node_id == node_id:
                return m
        return None

    def is_member(self, node_id: str) -> bool:
        return self.member(node_id) is not None

    def rank_of(self, node_id: str) -> int:
        m = self.member(node_id)
        if m is None:
            raise StructuralError(f"'{node_id}' is not a member at epoch {self.epoch}")
        return m.rank

    def addresses(self) -> Dict[str, PeerAddr]:
        return {m.node_id: m.addr for m in self.members}

    def ring_plan(self, numel: int) -> RingPlan:
        addrs = self.addresses()
        return RingPlan(self.epoch, tuple(addrs[node] for node in self.ring), numel)

    def donors_for(self, node_id: str) -> List[PeerAddr]:
        """Members that can serve a checkpoint to ``node_id``, by rank."""
        return [
            m.addr
            for m in sorted(self.members, key=lambda m: m.rank)
            if m.node_id != node_id and m.node_id not in self.joining
        ]

    def summary(self) -> Tuple[int, List[str]]:
        return self.epoch, self.member_ids


class JoinAssignment(BaseModel):
    """Published to ``join/<node>`` when a registration is admitted."""

    epoch: int
    rank: int
    shard_id: int
    start_step: int = Field(..., description="Outer step the node enters at")
    join_mode: JoinMode
    donors: List[PeerAddr] = Field(default_factory=list)


class Registration(BaseModel):
    node_id: str
    host: str = "sim"
    port: int = 0
    config_hash: str
    join_mode: JoinMode = "founder"


class Heartbeat(BaseModel):
    """Body of ``HEARTBEAT`` and ``DEATHRATTLE`` frames."""

    node_id: str
    outer_step: int = 0
    reason: str = ""
