# src/cli/simulate.py

"""Single-process simulation of a whole mesh with scripted churn.

Every role (coordinator and workers) runs as coroutines on one
:class:`~src.core.transport.VirtualClockLoop`, so a run is deterministic
given its config. Churn events fire either at outer-step boundaries (through
the coordinator's commit hook) or at simulated times:

- a join at step ``r`` registers right after barrier ``r - 1`` commits, so
  the coordinator admits it at barrier ``r``;
- a leave at step ``r`` leaves instead of entering barrier ``r``;
- a crash or link degradation at step ``r`` happens as barrier ``r``
  commits, i.e. during round ``r``.
"""

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd

from src.cli.config import ChurnEvent, RunConfig
from src.core.errors import FatalTrainingError
from src.core.transport import PeerAddr, SimNetwork, run_simulation
from src.patterns.elastic import (
    Checkpoint,
    Coordinator,
    JoinMode,
    MeshClient,
    MeshState,
    checkpoint_path,
    load_checkpoint_file,
    saved_steps,
)
from src.pipelines.diloco import (
    DiLoCoWorker,
    MeshConfig,
    MetricsSink,
    RoundMetrics,
    TrainResult,
    WorkerState,
)

logger = logging.getLogger(__name__)

COORDINATOR_ID = "coordinator"

Outcome = Union[TrainResult, BaseException]

ROUND_COLUMNS = [
    "outer_step",
    "world_size",
    "nodes",
    "mean_inner_loss",
    "eval_loss",
    "inner_time",
    "allreduce_time",
    "bytes_sent",
    "param_hashes",
    "replicas_agree",
]


def summarize_rounds(records: List[RoundMetrics]) -> pd.DataFrame:
    """One row per outer step across every node that finished it."""
    if not records:
        return pd.DataFrame(columns=ROUND_COLUMNS)
    frame = pd.DataFrame([r.model_dump() for r in records])
    frame["mean_inner_loss"] = pd.to_numeric(frame["mean_inner_loss"])
    grouped = frame.groupby("outer_step", sort=True)
    rounds = grouped.agg(
        world_size=("world_size", "max"),
        nodes=("node_id", "nunique"),
        mean_inner_loss=("mean_inner_loss", "mean"),
        eval_loss=("eval_loss", "mean"),
        inner_time=("inner_time", "max"),
        allreduce_time=("allreduce_time", "max"),
        bytes_sent=("bytes_sent", "sum"),
        param_hashes=("param_hash", lambda h: tuple(sorted(set(h)))),
    ).reset_index()
    rounds["replicas_agree"] = rounds["param_hashes"].map(len) == 1
    return rounds[ROUND_COLUMNS]


@dataclass
class SimulationResult:
    """What a simulated run produced."""

    records: List[RoundMetrics]
    finals: Dict[str, WorkerState]
    crashed: List[str] = field(default_factory=list)
    left: List[str] = field(default_factory=list)
    evictions: List[Tuple[float, str, str]] = field(default_factory=list)
    resumed_from: Optional[int] = None
    duration: float = 0.0

    @property
    def rounds(self) -> pd.DataFrame:
        return summarize_rounds(self.records)

    @property
    def world_sizes(self) -> List[int]:
        return [int(k) for k in self.rounds["world_size"]]

    def final_hashes(self) -> Dict[str, str]:
        return {node: state.shared_digest() for node, state in self.finals.items()}

    @property
    def replicas_agree(self) -> bool:
        rounds = self.rounds
        return bool(rounds["replicas_agree"].all()) and (
            len(set(self.final_hashes().values())) <= 1
        )


class Simulation:
    """Runs one :class:`RunConfig` on a simulated network.

    Args:
        config: A ``simulate`` run configuration.
        sink: Receives every round record; by default writes to
            ``config.metrics_path`` when set.
    """

    def __init__(self, config: RunConfig, sink: Optional[MetricsSink] = None):
        self.config = config
        self.sim = config.simulation
        self.script = self.sim.script()
        self.sink = sink or MetricsSink(config.metrics_path)
        self.network = self._new_network()
        self.coordinator: Optional[Coordinator] = None
        self.mesh_config: MeshConfig = config.mesh
        self.workers: Dict[str, DiLoCoWorker] = {}
        self.tasks: Dict[str, "asyncio.Task[TrainResult]"] = {}
        self.crashed: List[str] = []
        self.evictions: List[Tuple[float, str, str]] = []

    def _new_network(self) -> SimNetwork:
        return SimNetwork(
            default=self.sim.default_link,
            links=self.sim.link_table(),
            codec_bytes_per_second=self.sim.codec_bytes_per_second,
        )

    # -- node lifecycle -------------------------------------------------------

    def _launch(
        self, node: str, join_mode: JoinMode, resume: Optional[Checkpoint] = None
    ) -> None:
        transport = self.network.attach(node)
        client = MeshClient(transport, PeerAddr(COORDINATOR_ID), self.mesh_config)
        worker = DiLoCoWorker(
            transport, client, self.config.trainer, self.mesh_config, self.sink
        )
        self.workers[node] = worker
        self.tasks[node] = asyncio.ensure_future(worker.train(join_mode, resume))
        logger.info(f"sim: launched '{node}' ({join_mode})")

    def _crash(self, node: str) -> None:
        self.network.crash(node)
        task = self.tasks.get(node)
        if task is not None and not task.done():
            task.cancel()
        self.crashed.append(node)

    def _apply(self, event: ChurnEvent, boundary: Optional[int] = None) -> None:
        if event.join_mode is not None:
            self._launch(event.node, event.join_mode)
        elif event.action == "leave":
            worker = self.workers[event.node]
            worker.leave_at = boundary if boundary is not None else (
                worker.client.outer_step + 1
            )
        elif event.action == "crash":
            self._crash(event.node)
        elif event.action == "degrade-link":
            assert event.peer is not None and event.bandwidth_bps is not None
            self.network.set_bandwidth(event.node, event.peer, event.bandwidth_bps)

    def _on_commit(self, step: int, state: MeshState) -> None:
        for event in self.script.by_step(step + 1):
            if event.join_mode is not None or event.action == "leave":
                self._apply(event, boundary=step + 1)
        for event in self.script.by_step(step):
            if event.action in ("crash", "degrade-link"):
                self._apply(event)

    def _schedule_timed(self) -> None:
        loop = asyncio.get_running_loop()
        for event in self.script.timed:
            assert event.at is not None
            loop.call_at(event.at, self._apply, event)

    # -- segments ---------------------------------------------------------------

    async def _wait_all(self) -> Dict[str, Outcome]:
        while True:
            pending = [task for task in self.tasks.values() if not task.done()]
            if not pending:
                break
            await asyncio.wait(pending)
        outcomes: Dict[str, Outcome] = {}
        for node, task in self.tasks.items():
            if task.cancelled():
                outcomes[node] = asyncio.CancelledError(f"'{node}' crashed")
            elif task.exception() is not None:
                exc = task.exception()
                assert exc is not None
                outcomes[node] = exc
            else:
                outcomes[node] = task.result()
        return outcomes

    async def _segment(
        self, founders: List[str], resume: Dict[str, Checkpoint], churn: bool
    ) -> Dict[str, Outcome]:
        self.workers, self.tasks = {}, {}
        self.mesh_config = self.config.mesh.model_copy(
            update={"bootstrap_size": len(founders)}
        )
        transport = self.network.attach(COORDINATOR_ID)
        await transport.start()
        self.coordinator = Coordinator(transport, self.mesh_config)
        if churn:
            self.coordinator.on_commit(self._on_commit)
        await self.coordinator.start()
        for node in founders:
            self._launch(node, "founder", resume.get(node))
        if churn:
            self._schedule_timed()
        try:
            return await self._wait_all()
        finally:
            self.evictions.extend(self.coordinator.evictions)
            await self.coordinator.stop()

    def _common_checkpoint(
        self, nodes: List[str]
    ) -> Tuple[int, Dict[str, Checkpoint]]:
        directory = self.config.trainer.checkpoint_dir
        assert directory is not None
        shared = set.intersection(*(set(saved_steps(directory, n)) for n in nodes))
        if not shared:
            raise FatalTrainingError(f"survivors {nodes} share no saved checkpoint")
        step = max(shared)
        return step, {
            node: load_checkpoint_file(checkpoint_path(directory, node, step))
            for node in nodes
        }

    async def _run(self) -> SimulationResult:
        loop = asyncio.get_running_loop()
        outcomes = await self._segment(self.sim.founders(), {}, churn=True)
        resumed_from = None

        fatal = [
            node
            for node, outcome in outcomes.items()
            if isinstance(outcome, FatalTrainingError) and node not in self.crashed
        ]
        if fatal and self.sim.resume_on_fatal:
            step, checkpoints = self._common_checkpoint(fatal)
            logger.warning(
                f"sim: mesh failed at t={loop.time():.3f}; restarting {fatal} "
                f"from their step {step} checkpoints"
            )
            self.network = self._new_network()
            outcomes.update(await self._segment(fatal, checkpoints, churn=False))
            resumed_from = step

        errors = [
            (node, outcome)
            for node, outcome in outcomes.items()
            if isinstance(outcome, BaseException) and node not in self.crashed
        ]
        if errors:
            node, first = errors[0]
            raise FatalTrainingError(f"sim: '{node}' failed: {first}") from first

        results = [o for o in outcomes.values() if isinstance(o, TrainResult)]
        finals = {r.node_id: r.state for r in results if not r.left_early}
        return SimulationResult(
            records=list(self.sink.records),
            finals=finals,
            crashed=list(self.crashed),
            left=sorted(r.node_id for r in results if r.left_early),
            evictions=list(self.evictions),
            resumed_from=resumed_from,
            duration=loop.time(),
        )

    def run(self) -> SimulationResult:
        """Run to completion on a fresh virtual clock.

        Raises:
            FatalTrainingError: A live worker failed and the run could not
                resume.
        """
        return run_simulation(self._run(), time_limit=self.sim.time_limit)


def run_scenario(
    config: RunConfig, sink: Optional[MetricsSink] = None
) -> SimulationResult:
    return Simulation(config, sink).run()
