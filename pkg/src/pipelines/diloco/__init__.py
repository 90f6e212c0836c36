"""
DiLoCo Pipeline

Low-communication training over an elastic mesh.

Key Features:
- H local AdamW steps per round, one all-reduce of the pseudo-gradient
- Nesterov outer optimizer applied identically on every member
- Founder, blocking and non-blocking joins from donor checkpoints
- Per-round metrics as JSON lines, plus a synchronous data-parallel baseline
"""

from .baseline import BaselineResult, run_data_parallel_baseline
from .config import NODE_LOCAL_FIELDS, CommMode, MeshConfig, TrainerConfig
from .engine import (
    DiLoCoWorker,
    InnerPhaseResult,
    NodeLogAdapter,
    TrainResult,
    WorkerState,
    apply_outer_step,
    pseudo_gradient,
    run_inner_phase,
)
from .metrics import (
    MetricsSink,
    RoundMetrics,
    comm_reduction_factor,
    compute_utilization,
    read_metrics,
)

__all__ = [
    "NODE_LOCAL_FIELDS",
    "BaselineResult",
    "CommMode",
    "DiLoCoWorker",
    "InnerPhaseResult",
    "MeshConfig",
    "MetricsSink",
    "NodeLogAdapter",
    "RoundMetrics",
    "TrainResult",
    "TrainerConfig",
    "WorkerState",
    "apply_outer_step",
    "comm_reduction_factor",
    "compute_utilization",
    "pseudo_gradient",
    "read_metrics",
    "run_data_parallel_baseline",
    "run_inner_phase",
]
