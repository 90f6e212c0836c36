# src/pipelines/diloco/metrics.py

import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from pydantic import BaseModel, Field

from src.core.errors import RangeError

logger = logging.getLogger(__name__)

_PAYLOAD_SAVING = {"fp32": 1, "int8": 4}


class RoundMetrics(BaseModel):
    """One node's record of one outer round.

    Times are seconds on the transport clock (simulated on the simulator).
    ``mean_inner_loss`` is ``None`` for a round whose inner phase was
    skipped by a non-blocking joiner.
    """

    node_id: str
    outer_step: int = Field(..., ge=0)
    epoch: int = Field(..., ge=0)
    world_size: int = Field(..., ge=1, description="k that averaged this round")
    mean_inner_loss: Optional[float] = Field(default=None, ge=0)
    eval_loss: float = Field(..., ge=0)
    inner_time: float = Field(..., ge=0)
    allreduce_time: float = Field(..., ge=0)
    bytes_sent: int = Field(..., ge=0)
    bytes_received: int = Field(..., ge=0)
    lr_scale: float = Field(..., ge=0, le=1)
    inner_steps: int = Field(..., ge=0, description="Batches consumed this round")
    attempts: int = Field(default=1, ge=1)
    param_hash: str = Field(..., description="sha256 of the shared parameters after")


def comm_reduction_factor(inner_steps: int, mode: str) -> float:
    """Communication saved versus per-step fp32 all-reduce.

    ``H`` rounds fewer synchronizations times the payload saving of the
    transmitted dtype; the per-chunk codebook is ignored.
    """
    if inner_steps < 1:
        raise RangeError(f"inner_steps must be >= 1, got {inner_steps}")
    if mode not in _PAYLOAD_SAVING:
        raise RangeError(f"unknown mode '{mode}'")
    return float(inner_steps * _PAYLOAD_SAVING[mode])


def compute_utilization(records: Sequence[RoundMetrics]) -> float:
    """Share of time spent in inner compute rather than all-reduce."""
    if not records:
        raise ValueError("compute_utilization needs at least one record")
    inner = sum(r.inner_time for r in records)
    total = inner + sum(r.allreduce_time for r in records)
    return 1.0 if total == 0 else inner / total


class MetricsSink:
    """Collects records and, given a path, appends them as JSON lines."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[RoundMetrics] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def emit(self, record: RoundMetrics) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(record.model_dump_json() + "\n")

    def extend(self, records: Iterable[RoundMetrics]) -> None:
        for record in records:
            self.emit(record)


def read_metrics(path: Union[str, Path]) -> List[RoundMetrics]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [RoundMetrics.model_validate_json(line) for line in lines if line.strip()]
