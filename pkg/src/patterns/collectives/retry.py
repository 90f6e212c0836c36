# src/patterns/collectives/retry.py

"""Fault-tolerant all-reduce: restart over the survivors when a peer fails."""

import asyncio
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol

import numpy as np

from src.core.errors import FatalTrainingError, MeshError, RingFailure
from src.core.transport import Transport
from src.patterns.collectives.pipeline import CollectiveOptions
from src.patterns.collectives.ring import ReduceJob, RingPlan, allreduce

logger = logging.getLogger(__name__)


class RingMembership(Protocol):
    """What a collective needs from the mesh to survive failures."""

    async def ring_plan(self, numel: int) -> RingPlan:
        """Plan over the current members in the current ring order."""

    async def report_failure(self, node_id: str, epoch: int) -> None:
        """Tell the coordinator ``node_id`` failed during ``epoch``."""

    async def wait_for_epoch_change(
        self, epoch: int, timeout: Optional[float] = None
    ) -> int:
        """Return the first epoch greater than ``epoch``."""

    async def commit_collective(self, job_id: int, epoch: int) -> bool:
        """True once every member of ``epoch`` finished ``job_id``."""


@dataclass
class RetryOutcome:
    """Result of a collective plus how it was reached."""

    result: np.ndarray
    plan: RingPlan
    attempts: int
    failures: List[str] = field(default_factory=list)

    @property
    def world_size(self) -> int:
        return self.plan.k


async def allreduce_with_retry(
    transport: Transport,
    job: ReduceJob,
    mesh: RingMembership,
    options: Optional[CollectiveOptions] = None,
    max_retries: int = 3,
    epoch_timeout: Optional[float] = 120.0,
) -> RetryOutcome:
    """Ring all-reduce that restarts over survivors when a peer fails.

    Each attempt races the collective against a membership change. A failed
    attempt reports the peer it saw fail, waits for the coordinator to bump
    the epoch, and restarts from the preserved input over the new ring. A
    finished attempt counts only once the coordinator confirms every member
    of its epoch finished too; otherwise it is retried like a failure.

    Raises:
        FatalTrainingError: If retries run out, the membership never changes
            after a failure, or this node is no longer a member.
    """
    plan = job.plan
    failures: List[str] = []
    last_error: Optional[BaseException] = None

    for attempt in range(max_retries + 1):
        if transport.node_id not in plan.node_ids:
            raise FatalTrainingError(
                f"{transport.node_id} is not a member at epoch {plan.epoch}"
            )
        current = job.with_plan(plan)
        work = asyncio.ensure_future(allreduce(transport, current, options))
        watcher = asyncio.ensure_future(mesh.wait_for_epoch_change(plan.epoch))
        try:
            await asyncio.wait({work, watcher}, return_when=asyncio.FIRST_COMPLETED)
        except asyncio.CancelledError:
            work.cancel()
            watcher.cancel()
            raise

        if work.done() and work.exception() is None:
            if await mesh.commit_collective(job.job_id, plan.epoch):
                watcher.cancel()
                return RetryOutcome(work.result(), plan, attempt + 1, failures)
            last_error = RingFailure(None, f"epoch {plan.epoch} changed before commit")
        elif work.done():
            last_error = work.exception()
            assert last_error is not None
            failed = getattr(last_error, "failed_id", None)
            if failed is not None:
                failures.append(failed)
                await mesh.report_failure(failed, plan.epoch)
            if not isinstance(last_error, MeshError):
                watcher.cancel()
                raise last_error
        else:
            work.cancel()
            await asyncio.gather(work, return_exceptions=True)
            last_error = RingFailure(None, f"membership changed in epoch {plan.epoch}")

        logger.warning(
            f"{transport.node_id}: allreduce job {job.job_id} attempt {attempt + 1} "
            f"at epoch {plan.epoch} failed: {last_error}"
        )
        if attempt == max_retries:
            watcher.cancel()
            break
        try:
            await asyncio.wait_for(watcher, epoch_timeout)
        except asyncio.TimeoutError:
            raise FatalTrainingError(
                f"job {job.job_id}: no membership change within {epoch_timeout}s "
                f"after failure: {last_error}"
            ) from last_error
        plan = await mesh.ring_plan(job.plan.numel)
        if plan.k < 1:
            raise FatalTrainingError(f"job {job.job_id}: no surviving members")

    raise FatalTrainingError(
        f"allreduce job {job.job_id} failed after {max_retries + 1} attempts "
        f"(failed peers: {failures}); last error: {last_error}"
    )
