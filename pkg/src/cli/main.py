# src/cli/main.py

"""``elastic-diloco`` command line.

Subcommands::

    coordinator      serve membership and the KV store over TCP
    worker           join a coordinator over TCP and train
    simulate         run a whole mesh with scripted churn on a virtual clock
    bench-allreduce  time ring all-reduce on a simulated ring
    solve-ring       best ring order for a bandwidth table

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

import argparse
import asyncio
import contextlib
import json
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Any, Awaitable, Dict, List, Optional, TypeVar

from dotenv import load_dotenv

from src.cli.bench import bench_allreduce
from src.cli.config import ENV_LOG_LEVEL, RunConfig, load_run_config, parse_endpoint
from src.cli.simulate import COORDINATOR_ID, run_scenario
from src.core.errors import ConfigError, DecodeError, MeshError
from src.core.topology import BandwidthMatrix, solve_ring
from src.core.transport import LinkSpec, PeerAddr, TcpTransport
from src.patterns.elastic import (
    Coordinator,
    JoinMode,
    MeshClient,
    load_checkpoint_file,
)
from src.pipelines.diloco import (
    DiLoCoWorker,
    MetricsSink,
    TrainResult,
    run_data_parallel_baseline,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FATAL = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

T = TypeVar("T")


def configure_logging(level: str) -> None:
    name = level.upper()
    if name not in LOG_LEVELS:
        raise ConfigError("log_level", f"unknown level '{level}'")
    logging.basicConfig(level=name, format=LOG_FORMAT, force=True)


async def _until_signal(work: Awaitable[T]) -> Optional[T]:
    """Await ``work``; SIGINT/SIGTERM cancel it and return ``None``."""
    task = asyncio.ensure_future(work)
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        with contextlib.suppress(NotImplementedError):
            loop.add_signal_handler(sig, task.cancel)
    try:
        return await task
    except asyncio.CancelledError:
        logger.warning("interrupted, shutting down")
        return None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_coordinator(config: RunConfig) -> int:
    """Serve until signaled."""
    if config.coordinator:
        host, port = parse_endpoint(config.coordinator)
    else:
        host, port = config.host, config.port

    async def serve() -> None:
        transport = TcpTransport(COORDINATOR_ID, host, port)
        await transport.start()
        coordinator = Coordinator(transport, config.mesh)
        try:
            await _until_signal(coordinator.serve())
        finally:
            await transport.stop()

    asyncio.run(serve())
    return EXIT_OK


def cmd_worker(config: RunConfig, resume_path: Optional[str] = None) -> int:
    """Join the mesh at ``config.coordinator`` and train to the end."""
    assert config.coordinator and config.node_id
    host, port = parse_endpoint(config.coordinator)
    resume = load_checkpoint_file(resume_path) if resume_path else None
    join_mode: JoinMode = "blocking" if config.trainer.blocking_join else "nonblocking"

    async def train() -> Optional[TrainResult]:
        assert config.node_id is not None
        transport = TcpTransport(config.node_id, config.host, config.port)
        await transport.start()
        coordinator = PeerAddr(COORDINATOR_ID, host, port)
        client = MeshClient(transport, coordinator, config.mesh)
        worker = DiLoCoWorker(
            transport,
            client,
            config.trainer,
            config.mesh,
            MetricsSink(config.metrics_path),
        )
        try:
            result = await _until_signal(worker.train(join_mode, resume))
            if result is None:
                await client.send_deathrattle("terminated by signal")
            return result
        finally:
            await transport.stop()

    result = asyncio.run(train())
    if result is None:
        return EXIT_FATAL
    print(
        json.dumps(
            {
                "node_id": result.node_id,
                "outer_step": result.state.outer_step,
                "param_hash": result.state.params.digest(),
                "left_early": result.left_early,
            }
        )
    )
    return EXIT_OK


def cmd_simulate(config: RunConfig, baseline: bool = False) -> int:
    """Run the scenario; print the per-round table and a JSON summary."""
    result = run_scenario(config)
    rounds = result.rounds
    print(rounds.drop(columns=["param_hashes"]).to_string(index=False))
    summary: Dict[str, Any] = {
        "rounds": len(rounds),
        "simulated_seconds": round(result.duration, 6),
        "final_eval_loss": (
            float(rounds["eval_loss"].iloc[-1]) if len(rounds) else None
        ),
        "replicas_agree": result.replicas_agree,
        "crashed": result.crashed,
        "left": result.left,
        "resumed_from": result.resumed_from,
    }
    if baseline:
        reference = run_data_parallel_baseline(
            config.trainer, config.simulation.initial_nodes
        )
        summary["baseline_eval_loss"] = reference.eval_losses[-1]
    print(json.dumps(summary, sort_keys=True))
    if not result.replicas_agree:
        logger.error("replicas diverged: parameter hashes differ between nodes")
        return EXIT_FATAL
    return EXIT_OK


def cmd_bench_allreduce(args: argparse.Namespace) -> int:
    link = LinkSpec(bandwidth_bps=args.bandwidth, latency_ms=args.latency_ms)
    frame = bench_allreduce(
        sizes=args.sizes,
        modes=args.modes,
        k=args.k,
        link=link,
        pipelined=not args.no_pipeline,
        segment_elems=args.segments,
        codec_bytes_per_second=args.codec_bps,
        seed=args.seed,
    )
    print(frame.to_csv(index=False) if args.csv else frame.to_string(index=False))
    return EXIT_OK


def cmd_solve_ring(matrix_path: str) -> int:
    try:
        text = Path(matrix_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("matrix", f"cannot read '{matrix_path}': {exc}") from exc
    try:
        matrix = BandwidthMatrix.from_text(text)
    except DecodeError as exc:
        raise ConfigError("matrix", str(exc)) from exc
    ring = solve_ring(matrix)
    print(f"order: {' '.join(ring.labels(matrix.node_ids))}")
    print(f"objective: {ring.objective:.9g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--metrics", help="Metrics output path (JSON lines)")
    parser.add_argument("--seed", type=int, help="Override trainer.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elastic-diloco", description="Elastic DiLoCo training toolkit"
    )
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    coord = sub.add_parser("coordinator", help="Run the mesh coordinator")
    _add_config_flags(coord)
    coord.add_argument("--host", help="Listen address")
    coord.add_argument("--port", type=int, help="Listen port")

    worker = sub.add_parser("worker", help="Join a mesh and train")
    _add_config_flags(worker)
    worker.add_argument("--node-id", help="Unique id of this worker")
    worker.add_argument("--coordinator", help="Coordinator host:port")
    worker.add_argument("--host", help="Listen address for peers")
    worker.add_argument("--port", type=int, help="Listen port for peers")
    worker.add_argument(
        "--nonblocking", action="store_true", default=None, help="Join non-blocking"
    )
    worker.add_argument("--resume", help="Checkpoint file to start from")

    simulate = sub.add_parser("simulate", help="Simulate a mesh with churn")
    _add_config_flags(simulate)
    simulate.add_argument(
        "--resume-on-fatal",
        action="store_true",
        default=None,
        help="Restart survivors from their newest shared checkpoint",
    )
    simulate.add_argument(
        "--baseline", action="store_true", help="Also run the data-parallel baseline"
    )

    bench = sub.add_parser("bench-allreduce", help="Benchmark ring all-reduce")
    bench.add_argument("--sizes", type=int, nargs="+", default=[1 << 16, 1 << 20])
    bench.add_argument(
        "--modes", nargs="+", choices=["fp32", "int8"], default=["fp32", "int8"]
    )
    bench.add_argument("--k", type=int, default=4, help="Ring size")
    bench.add_argument("--bandwidth", type=float, default=1e9, help="Bits per second")
    bench.add_argument("--latency-ms", type=float, default=0.0)
    bench.add_argument("--segments", type=int, help="Elements per pipeline segment")
    bench.add_argument("--no-pipeline", action="store_true")
    bench.add_argument("--codec-bps", type=float, help="Codec bytes per second")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--csv", action="store_true", help="Print CSV")

    solve = sub.add_parser("solve-ring", help="Solve the ring order for a matrix")
    solve.add_argument("matrix", help="Whitespace table of bandwidths")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values: Dict[str, Any] = {
        "role": args.command,
        "metrics_path": getattr(args, "metrics", None),
        "trainer.seed": getattr(args, "seed", None),
        "log_level": args.log_level,
    }
    if args.command in ("coordinator", "worker"):
        values["transport"] = "tcp"
        values["host"] = args.host
        values["port"] = args.port
    if args.command == "worker":
        values["node_id"] = args.node_id
        values["coordinator"] = args.coordinator
        if args.nonblocking:
            values["trainer.blocking_join"] = False
    if args.command == "simulate":
        values["sim.resume_on_fatal"] = args.resume_on_fatal
    return values


def _run(args: argparse.Namespace) -> int:
    if args.command == "bench-allreduce":
        return cmd_bench_allreduce(args)
    if args.command == "solve-ring":
        return cmd_solve_ring(args.matrix)

    config = load_run_config(args.config, _overrides(args))
    configure_logging(config.log_level)
    if args.command == "coordinator":
        return cmd_coordinator(config)
    if args.command == "worker":
        return cmd_worker(config, args.resume)
    return cmd_simulate(config, baseline=args.baseline)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level or os.environ.get(ENV_LOG_LEVEL, "INFO"))
        return _run(args)
    except ConfigError as exc:
        logger.error(f"configuration error: {exc}")
        print(f"elastic-diloco: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MeshError as exc:
        logger.error(f"{args.command} failed: {exc}")
        print(f"elastic-diloco: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
