"""Ring all-reduce with quantized transport, pipelining and failure retry."""

from .pipeline import (
    CHUNK_HEADER,
    DEFAULT_SEGMENT_ELEMS,
    ChunkHeader,
    CollectiveOptions,
    Phase,
    ReduceMode,
    segment_bounds,
)
from .reference import oracle_mean, reference_ring_mean, scalar_quantize
from .retry import RetryOutcome, RingMembership, allreduce_with_retry
from .ring import ReduceJob, RingPlan, allreduce

__all__ = [
    "CHUNK_HEADER",
    "DEFAULT_SEGMENT_ELEMS",
    "ChunkHeader",
    "CollectiveOptions",
    "Phase",
    "ReduceJob",
    "ReduceMode",
    "RetryOutcome",
    "RingMembership",
    "RingPlan",
    "allreduce",
    "allreduce_with_retry",
    "oracle_mean",
    "reference_ring_mean",
    "scalar_quantize",
    "segment_bounds",
]
