# src/cli/bench.py

"""Simulated all-reduce benchmark: makespan, traffic and error per tensor size."""

import asyncio
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core.errors import StructuralError
from src.core.numerics import RngState
from src.core.transport import LinkSpec, SimNetwork, SimTransport, run_simulation
from src.patterns.collectives import (
    CollectiveOptions,
    ReduceJob,
    RingPlan,
    allreduce,
    oracle_mean,
    reference_ring_mean,
)

logger = logging.getLogger(__name__)

BENCH_COLUMNS = [
    "size",
    "mode",
    "k",
    "makespan_s",
    "bytes_per_node",
    "payload_bytes",
    "rmse",
    "max_abs_error",
    "matches_reference",
]


def bench_inputs(size: int, k: int, seed: int) -> List[np.ndarray]:
    """Standard-normal inputs, one independent stream per participant."""
    return [
        RngState(seed).generator(stream).standard_normal(size, dtype=np.float32)
        for stream in range(k)
    ]


async def _one_run(
    inputs: List[np.ndarray],
    mode: str,
    link: LinkSpec,
    options: CollectiveOptions,
    codec_bytes_per_second: Optional[float],
) -> Tuple[np.ndarray, float, int]:
    network = SimNetwork(default=link, codec_bytes_per_second=codec_bytes_per_second)
    transports: List[SimTransport] = [
        network.attach(f"n{i}") for i in range(len(inputs))
    ]
    plan = RingPlan(0, tuple(t.address for t in transports), inputs[0].size)
    loop = asyncio.get_running_loop()
    start = loop.time()
    results = await asyncio.gather(
        *(
            allreduce(transport, ReduceJob(0, x, mode, plan), options)
            for transport, x in zip(transports, inputs)
        )
    )
    makespan = loop.time() - start
    for other in results[1:]:
        if not np.array_equal(other, results[0]):
            raise StructuralError("participants finished with different results")
    sent = max(t.counters.bytes_sent for t in transports)
    return results[0], makespan, sent


def bench_allreduce(
    sizes: Sequence[int],
    modes: Sequence[str] = ("fp32", "int8"),
    k: int = 4,
    link: Optional[LinkSpec] = None,
    pipelined: bool = True,
    segment_elems: Optional[int] = None,
    codec_bytes_per_second: Optional[float] = None,
    seed: int = 0,
) -> pd.DataFrame:
    """Time one ring all-reduce per (size, mode) on a simulated ring of ``k``.

    Each row carries the simulated makespan, the busiest node's bytes sent,
    the error against the float64 mean, and whether the result matches the
    scalar hop-by-hop reference bit for bit.
    """
    if k < 2:
        raise StructuralError(f"a ring needs at least 2 participants, got {k}")
    link = link or LinkSpec()
    options = CollectiveOptions(pipelined=pipelined)
    if segment_elems is not None:
        options = options.model_copy(update={"segment_elems": segment_elems})

    rows = []
    for size in sizes:
        inputs = bench_inputs(size, k, seed)
        exact = oracle_mean(inputs)
        for mode in modes:
            result, makespan, sent = run_simulation(
                _one_run(inputs, mode, link, options, codec_bytes_per_second)
            )
            error = result.astype(np.float64) - exact
            reference = reference_ring_mean(
                inputs, mode=mode, segment_elems=options.segment_elems
            )
            rows.append(
                {
                    "size": size,
                    "mode": mode,
                    "k": k,
                    "makespan_s": makespan,
                    "bytes_per_node": sent,
                    "payload_bytes": 4 * size,
                    "rmse": float(np.sqrt(np.mean(error**2))),
                    "max_abs_error": float(np.max(np.abs(error))),
                    "matches_reference": bool(np.array_equal(result, reference)),
                }
            )
            logger.info(
                f"bench size={size} mode={mode} k={k}: {makespan:.4f}s, "
                f"{sent} B/node"
            )
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)
