# tests/conftest.py

from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pytest

from src.cli.config import ChurnEvent, RunConfig, SimConfig
from src.core.numerics import ModelParams, ToyModelSpec
from src.core.transport import LinkSpec
from src.pipelines.diloco import MeshConfig, TrainerConfig

SCENARIOS = Path(__file__).resolve().parents[1] / "work" / "scenarios"


@pytest.fixture
def scenarios_dir() -> Path:
    """Directory holding the bundled YAML scenarios."""
    return SCENARIOS


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_model() -> ToyModelSpec:
    """A toy MLP small enough for finite-difference checks."""
    return ToyModelSpec(d_in=3, d_hidden=4, d_out=2)


@pytest.fixture
def tiny_trainer(small_model: ToyModelSpec) -> TrainerConfig:
    """Short training run used by the simulated mesh tests."""
    return TrainerConfig(
        inner_steps=5,
        outer_steps=6,
        batch_size=8,
        seed=3,
        model=small_model,
        eval_batch_size=32,
        step_seconds=0.1,
    )


@pytest.fixture
def mesh_config() -> MeshConfig:
    """Default heartbeat timing: 2 s interval, 6 s timeout."""
    return MeshConfig(heartbeat_interval=2.0, heartbeat_timeout=6.0)


def make_sim_config(
    trainer: TrainerConfig,
    nodes: int,
    events: Optional[List[Dict[str, Any]]] = None,
    mesh: Optional[MeshConfig] = None,
    **sim: Any,
) -> RunConfig:
    """A ``simulate`` run over ``nodes`` founders with inline churn events."""
    sim.setdefault("default_link", LinkSpec(bandwidth_bps=1e8, latency_ms=1.0))
    return RunConfig(
        trainer=trainer,
        mesh=mesh or MeshConfig(),
        sim=SimConfig(
            initial_nodes=nodes,
            churn_events=[ChurnEvent(**event) for event in events or []],
            **sim,
        ),
    )


def scalar_params(value: float) -> ModelParams:
    return ModelParams([("theta", np.array([value], dtype=np.float32))])
