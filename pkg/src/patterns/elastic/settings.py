# src/patterns/elastic/settings.py

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class MeshSettings(BaseModel):
    """Timing and policy knobs shared by the coordinator and its clients."""

    model_config = ConfigDict(frozen=True)

    heartbeat_interval: float = Field(
        default=2.0, gt=0, description="Seconds between heartbeats and failure scans"
    )
    heartbeat_timeout: float = Field(
        default=6.0, gt=0, description="Silence after which a node is evicted"
    )
    bootstrap_size: int = Field(
        default=1, ge=1, description="Founders needed before the first barrier commits"
    )
    mass_failure_fraction: float = Field(
        default=0.5,
        gt=0,
        le=1,
        description="Halt when more than this share of a round's members is lost",
    )
    floor_bps: float = Field(
        default=1e6, gt=0, description="Bandwidth assumed for unmeasured pairs"
    )
    hysteresis: float = Field(
        default=0.1, ge=0, description="Relative gain needed to publish a new ring"
    )
    op_timeout: Optional[float] = Field(
        default=30.0, gt=0, description="Seconds to wait for a coordinator reply"
    )
    join_timeout: Optional[float] = Field(
        default=600.0, gt=0, description="Seconds a joiner waits to be admitted"
    )

    @model_validator(mode="after")
    def _timeout_covers_interval(self) -> "MeshSettings":
        if self.heartbeat_timeout <= self.heartbeat_interval:
            raise ValueError("heartbeat_timeout must exceed heartbeat_interval")
        return self
