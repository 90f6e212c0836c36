"""Command-line entry points, run configuration and the simulation harness."""

from .bench import bench_allreduce
from .config import ChurnEvent, ChurnScript, RunConfig, SimConfig, load_run_config
from .simulate import Simulation, SimulationResult, run_scenario, summarize_rounds

__all__ = [
    "ChurnEvent",
    "ChurnScript",
    "RunConfig",
    "SimConfig",
    "Simulation",
    "SimulationResult",
    "bench_allreduce",
    "load_run_config",
    "run_scenario",
    "summarize_rounds",
]
