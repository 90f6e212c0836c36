# src/pipelines/diloco/config.py

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.numerics import HyperParams, ToyModelSpec
from src.patterns.collectives import CollectiveOptions
from src.patterns.elastic import MeshSettings, config_hash

CommMode = Literal["fp32", "int8"]

# Fields a node may set differently from its peers without being refused.
NODE_LOCAL_FIELDS = {"blocking_join", "checkpoint_every", "checkpoint_dir"}


def _toy_hyper() -> HyperParams:
    return HyperParams(inner_lr=1e-2, warmup_steps=20, weight_decay=0.01)


class TrainerConfig(BaseModel):
    """What one DiLoCo run trains and how."""

    model_config = ConfigDict(extra="forbid")

    inner_steps: int = Field(default=100, ge=1, description="H: inner steps per round")
    outer_steps: int = Field(default=20, ge=1, description="T: outer rounds")
    batch_size: int = Field(default=16, ge=1, description="Samples per inner step")
    seed: int = Field(default=0, ge=0, description="Run seed (data, init, target)")
    mode: CommMode = Field(default="fp32", description="Pseudo-gradient transport")
    hyper: HyperParams = Field(default_factory=_toy_hyper)
    model: ToyModelSpec = Field(default_factory=ToyModelSpec)
    identical_shards: bool = Field(
        default=False, description="Every node reads shard 0 (determinism checks)"
    )
    eval_batch_size: int = Field(default=256, ge=1, description="Held-out samples")
    step_seconds: float = Field(
        default=0.0, ge=0, description="Simulated compute time per inner step"
    )
    collective: CollectiveOptions = Field(default_factory=CollectiveOptions)
    blocking_join: bool = Field(default=True, description="Join mode for late nodes")
    checkpoint_every: int = Field(
        default=0, ge=0, description="Save to disk every N rounds; 0 disables"
    )
    checkpoint_dir: Optional[str] = Field(default=None)

    @model_validator(mode="after")
    def _fill_schedule(self) -> "TrainerConfig":
        total = self.inner_steps * self.outer_steps
        if self.hyper.total_steps is None:
            self.hyper = self.hyper.model_copy(update={"total_steps": total})
        elif self.hyper.total_steps != total:
            raise ValueError(
                f"hyper.total_steps={self.hyper.total_steps} must equal "
                f"inner_steps x outer_steps = {total}"
            )
        if self.checkpoint_every and not self.checkpoint_dir:
            raise ValueError("checkpoint_every requires checkpoint_dir")
        return self

    @property
    def total_inner_steps(self) -> int:
        return self.inner_steps * self.outer_steps

    def fingerprint(self) -> str:
        return config_hash(self, exclude=NODE_LOCAL_FIELDS)


class MeshConfig(MeshSettings):
    """Mesh timing plus the collective retry policy."""

    max_retries: int = Field(default=3, ge=0, description="Collective retries")
    epoch_timeout: Optional[float] = Field(
        default=120.0, gt=0, description="Wait for a new epoch after a failure"
    )
    barrier_timeout: Optional[float] = Field(
        default=None, gt=0, description="Longest wait at an outer-step barrier"
    )
    probe_interval: Optional[float] = Field(
        default=None, gt=0, description="Seconds between background probes"
    )
    probe_timeout: Optional[float] = Field(default=30.0, gt=0)
