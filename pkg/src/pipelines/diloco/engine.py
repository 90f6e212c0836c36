# src/pipelines/diloco/engine.py

"""The DiLoCo training loop.

Each round every member:

1. waits at the outer-step barrier (joins commit here),
2. runs H AdamW steps from the shared parameters on its own shard while the
   host-retained copy of the shared parameters stays untouched,
3. all-reduces the pseudo-gradient ``retained - local`` (retrying over
   survivors if a peer dies),
4. applies the same Nesterov outer step to the same averaged
   pseudo-gradient, so every member ends the round with identical bits.

The pure pieces (:func:`run_inner_phase`, :func:`apply_outer_step`) take and
return :class:`WorkerState`; :class:`DiLoCoWorker` wires them to a mesh.
"""

import asyncio
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, MutableMapping, Optional, Set, Tuple

import numpy as np

from src.core.errors import (
    CoordinatorError,
    FatalTrainingError,
    MeshError,
    NumericError,
)
from src.core.numerics import (
    AdamWState,
    ModelParams,
    NesterovState,
    RngState,
    adamw_step,
    compute_pseudo_gradient,
    eval_batch,
    init_toy_params,
    nesterov_outer_step,
    synth_batch,
    toy_forward_backward,
    toy_loss,
    wsd_lr_scale,
)
from src.core.transport import Transport, serve_probes
from src.patterns.collectives import ReduceJob, allreduce_with_retry
from src.patterns.elastic import (
    Checkpoint,
    JoinMode,
    JoinResult,
    MeshClient,
    MeshState,
    join_mesh,
    save_checkpoint_file,
    serve_checkpoints,
)
from src.pipelines.diloco.config import MeshConfig, TrainerConfig
from src.pipelines.diloco.metrics import MetricsSink, RoundMetrics

logger = logging.getLogger(__name__)


class NodeLogAdapter(logging.LoggerAdapter):
    """Prefixes every record with the node id."""

    def process(
        self, msg: Any, kwargs: MutableMapping[str, Any]
    ) -> Tuple[Any, MutableMapping[str, Any]]:
        return f"[{self.extra['node_id']}] {msg}", kwargs


@dataclass(frozen=True)
class WorkerState:
    """A node's training state.

    At an outer-step boundary ``params`` and ``retained`` are equal; during
    the inner phase ``params`` moves and ``retained`` keeps the shared
    parameters the round started from.
    """

    outer_step: int
    params: ModelParams
    retained: ModelParams
    adam: AdamWState
    nesterov: NesterovState
    data_position: int = 0
    shard_id: int = 0

    @classmethod
    def initial(cls, config: TrainerConfig, shard_id: int = 0) -> "WorkerState":
        params = init_toy_params(config.model, config.seed)
        return cls(
            outer_step=0,
            params=params,
            retained=params.copy(),
            adam=AdamWState.zeros(params),
            nesterov=NesterovState.zeros(params),
            shard_id=shard_id,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "WorkerState":
        return cls(
            outer_step=checkpoint.outer_step,
            params=checkpoint.params.copy(),
            retained=checkpoint.retained.copy(),
            adam=checkpoint.adam,
            nesterov=checkpoint.nesterov,
            data_position=checkpoint.data_position,
            shard_id=checkpoint.shard_id,
        )

    def to_checkpoint(self, config_hash: str) -> Checkpoint:
        return Checkpoint(
            outer_step=self.outer_step,
            params=self.params.copy(),
            retained=self.retained.copy(),
            adam=self.adam,
            nesterov=self.nesterov,
            data_position=self.data_position,
            shard_id=self.shard_id,
            config_hash=config_hash,
        )

    def shared_digest(self) -> str:
        """Hash of everything replicated across members."""
        return "/".join(
            [
                str(self.outer_step),
                self.params.digest(),
                self.retained.digest(),
                self.nesterov.buffer.digest(),
            ]
        )


@dataclass
class InnerPhaseResult:
    state: WorkerState
    losses: List[float]
    lr_scale: float

    @property
    def mean_loss(self) -> Optional[float]:
        return float(np.mean(self.losses)) if self.losses else None


def run_inner_phase(state: WorkerState, config: TrainerConfig) -> InnerPhaseResult:
    """Run H AdamW steps on this node's shard, starting at its data position.

    Raises:
        NumericError: A loss or gradient went non-finite; the message names
            the round and step.
    """
    shard = 0 if config.identical_shards else state.shard_id
    rng = RngState(config.seed)
    params, adam = state.params, state.adam
    position = state.data_position
    losses: List[float] = []
    scale = 0.0
    for h in range(config.inner_steps):
        batch = synth_batch(rng.at(position), shard, config.batch_size, config.model)
        scale = wsd_lr_scale(state.outer_step * config.inner_steps + h, config.hyper)
        try:
            loss, grads = toy_forward_backward(params, batch)
            params, adam = adamw_step(params, grads, adam, config.hyper, scale)
        except NumericError as exc:
            raise NumericError(
                f"round {state.outer_step}, inner step {h}, shard {shard}: {exc}",
                name=exc.name,
            ) from exc
        losses.append(loss)
        position += 1
    updated = replace(state, params=params, adam=adam, data_position=position)
    return InnerPhaseResult(updated, losses, scale)


def pseudo_gradient(state: WorkerState) -> ModelParams:
    return compute_pseudo_gradient(state.retained, state.params)


def apply_outer_step(
    state: WorkerState, averaged: ModelParams, config: TrainerConfig
) -> WorkerState:
    """Nesterov step from the retained parameters; ends the round.

    With no momentum, an outer lr of 1 and an average equal to this node's
    own pseudo-gradient, the result is the local parameters bit for bit.
    """
    hp = config.hyper
    params, nesterov = nesterov_outer_step(
        state.retained, averaged, state.nesterov, hp
    )
    if (
        hp.outer_momentum == 0.0
        and hp.outer_lr == 1.0
        and averaged.bit_equal(pseudo_gradient(state))
    ):
        # retained - (retained - local) rounds when a coordinate crosses zero.
        params = state.params.copy()
    return replace(
        state,
        outer_step=state.outer_step + 1,
        params=params,
        retained=params.copy(),
        nesterov=nesterov,
    )


@dataclass
class TrainResult:
    node_id: str
    state: WorkerState
    metrics: List[RoundMetrics] = field(default_factory=list)
    left_early: bool = False

    @property
    def checkpoint_hash(self) -> str:
        return self.state.shared_digest()


class DiLoCoWorker:
    """One training node attached to a mesh.

    Args:
        transport: This node's endpoint.
        client: Mesh client bound to the same transport.
        config: Shared training configuration.
        mesh_config: Timing and retry policy.
        sink: Where round records go; a private in-memory sink by default.
    """

    def __init__(
        self,
        transport: Transport,
        client: MeshClient,
        config: TrainerConfig,
        mesh_config: Optional[MeshConfig] = None,
        sink: Optional[MetricsSink] = None,
    ):
        self.transport = transport
        self.client = client
        self.config = config
        self.mesh_config = mesh_config or MeshConfig()
        self.sink = sink or MetricsSink()
        self.log = NodeLogAdapter(logger, {"node_id": transport.node_id})
        self.fingerprint = config.fingerprint()
        self.state: Optional[WorkerState] = None
        self.leave_at: Optional[int] = None
        self._snapshots: Dict[int, Checkpoint] = {}
        self._eval = eval_batch(config.seed, config.eval_batch_size, config.model)
        self._services: Set["asyncio.Task[None]"] = set()

    @property
    def node_id(self) -> str:
        return self.transport.node_id

    # -- checkpoints ------------------------------------------------------------

    def _remember_boundary(self, state: WorkerState) -> None:
        self._snapshots[state.outer_step] = state.to_checkpoint(self.fingerprint)
        for step in [s for s in self._snapshots if s < state.outer_step - 1]:
            del self._snapshots[step]

    def snapshot(self, step: int) -> Optional[Checkpoint]:
        return self._snapshots.get(step)

    def _save(self, state: WorkerState, final: bool = False) -> Optional[Path]:
        cfg = self.config
        if not cfg.checkpoint_dir:
            return None
        due = cfg.checkpoint_every and state.outer_step % cfg.checkpoint_every == 0
        if not (final or due):
            return None
        return save_checkpoint_file(
            state.to_checkpoint(self.fingerprint), cfg.checkpoint_dir, self.node_id
        )

    # -- background services ----------------------------------------------------

    def _spawn(self, coro: Any) -> None:
        task = asyncio.ensure_future(coro)
        self._services.add(task)
        task.add_done_callback(self._services.discard)

    async def _probe_loop(self, interval: float) -> None:
        while True:
            await asyncio.sleep(interval)
            try:
                await self.client.refresh_topology(
                    timeout=self.mesh_config.probe_timeout
                )
            except MeshError as exc:
                self.log.warning(f"background probe failed: {exc}")

    def _start_services(self) -> None:
        self._spawn(serve_checkpoints(self.transport, self.snapshot))
        self._spawn(serve_probes(self.transport))
        if self.mesh_config.probe_interval:
            self._spawn(self._probe_loop(self.mesh_config.probe_interval))
        self.client.start_heartbeats()

    async def _stop_services(self) -> None:
        tasks = list(self._services)
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        await self.client.close()

    # -- the round ----------------------------------------------------------------

    async def inner_phase(self, state: WorkerState) -> InnerPhaseResult:
        result = run_inner_phase(state, self.config)
        await self.transport.compute(self.config.inner_steps * self.config.step_seconds)
        return result

    async def outer_sync(self, state: WorkerState) -> Tuple[WorkerState, int, int]:
        """All-reduce the pseudo-gradient and apply the outer step.

        Returns ``(new_state, world_size, attempts)``.
        """
        delta = pseudo_gradient(state)
        plan = await self.client.ring_plan(delta.numel)
        job = ReduceJob(state.outer_step, delta.flatten(), self.config.mode, plan)
        outcome = await allreduce_with_retry(
            self.transport,
            job,
            self.client,
            self.config.collective,
            max_retries=self.mesh_config.max_retries,
            epoch_timeout=self.mesh_config.epoch_timeout,
        )
        averaged = delta.unflatten(outcome.result)
        new_state = apply_outer_step(state, averaged, self.config)
        return new_state, outcome.world_size, outcome.attempts

    async def _round(self, state: WorkerState, skip_inner: bool) -> WorkerState:
        t = state.outer_step
        clock = self.transport.now
        counters = self.transport.counters

        start = clock()
        if skip_inner:
            inner = InnerPhaseResult(state, [], 0.0)
            self.log.info(f"round {t}: joined mid-round, contributing a zero delta")
        else:
            inner = await self.inner_phase(state)
        inner_time = clock() - start

        sent, received = counters.bytes_sent, counters.bytes_received
        start = clock()
        new_state, world_size, attempts = await self.outer_sync(inner.state)
        sync_time = clock() - start
        epoch = self.client.state.epoch if self.client.state else 0

        record = RoundMetrics(
            node_id=self.node_id,
            outer_step=t,
            epoch=epoch,
            world_size=world_size,
            mean_inner_loss=inner.mean_loss,
            eval_loss=toy_loss(new_state.params, self._eval),
            inner_time=inner_time,
            allreduce_time=sync_time,
            bytes_sent=counters.bytes_sent - sent,
            bytes_received=counters.bytes_received - received,
            lr_scale=inner.lr_scale,
            inner_steps=len(inner.losses),
            attempts=attempts,
            param_hash=new_state.params.digest(),
        )
        self.sink.emit(record)
        self.log.info(
            f"round {t} done at t={clock():.3f}: k={world_size} "
            f"loss={record.mean_inner_loss} eval={record.eval_loss:.5f}"
        )
        return new_state

    # -- entry point --------------------------------------------------------------

    def _starting_state(
        self, joined: JoinResult, resume: Optional[Checkpoint]
    ) -> WorkerState:
        if joined.checkpoint is not None and joined.assignment is not None:
            donor = WorkerState.from_checkpoint(joined.checkpoint)
            shard = joined.assignment.shard_id
            position = donor.data_position if shard == donor.shard_id else 0
            return replace(donor, shard_id=shard, data_position=position)
        if resume is not None:
            return WorkerState.from_checkpoint(resume)
        return WorkerState.initial(self.config)

    def _adopt_shard(self, state: WorkerState, mesh: MeshState) -> WorkerState:
        member = mesh.member(self.node_id)
        if member is None or member.shard_id == state.shard_id:
            return state
        return replace(state, shard_id=member.shard_id, data_position=0)

    async def train(
        self, join_mode: JoinMode = "founder", resume: Optional[Checkpoint] = None
    ) -> TrainResult:
        """Join the mesh and run rounds until ``outer_steps`` are done.

        Args:
            join_mode: ``founder`` for nodes present at start, otherwise
                ``blocking`` or ``nonblocking``.
            resume: Restart from this checkpoint (founders only).

        Raises:
            FatalTrainingError: Evicted, mesh halted, retries exhausted or
                the coordinator was lost.
        """
        self._start_services()
        try:
            return await self._train(join_mode, resume)
        except CoordinatorError as exc:
            self.log.error(f"coordinator lost: {exc}")
            raise FatalTrainingError(
                f"{self.node_id}: coordinator lost: {exc}"
            ) from exc
        except FatalTrainingError as exc:
            self.log.error(f"aborting: {exc}")
            raise
        except Exception as exc:
            self.log.error(f"crashed: {exc!r}")
            await self.client.send_deathrattle(repr(exc))
            raise
        finally:
            await self._stop_services()

    async def _train(
        self, join_mode: JoinMode, resume: Optional[Checkpoint]
    ) -> TrainResult:
        cfg = self.config
        joined = await join_mesh(
            self.client, self.fingerprint, join_mode, self.mesh_config.join_timeout
        )
        state = self._starting_state(joined, resume)
        resumed = resume is not None and joined.founder
        late = not joined.founder
        skip_inner = joined.mode == "nonblocking"
        if late:
            self._remember_boundary(state)
            self.log.info(
                f"synced step {state.outer_step} checkpoint "
                f"(params {state.params.digest()[:12]})"
            )

        first = True
        while state.outer_step < cfg.outer_steps:
            if not (late and first):
                self._remember_boundary(state)
                if self.leave_at is not None and state.outer_step >= self.leave_at:
                    await self.client.leave_gracefully()
                    self.state = state
                    return TrainResult(self.node_id, state, self.sink.records, True)
                mesh = await self.client.barrier(
                    state.outer_step, self.mesh_config.barrier_timeout
                )
                if first and not resumed:
                    state = self._adopt_shard(state, mesh)
            state = await self._round(state, skip_inner and first)
            self.state = state
            self._save(state)
            first = False

        self._remember_boundary(state)
        self._save(state, final=True)
        self.state = state
        return TrainResult(self.node_id, state, self.sink.records)
