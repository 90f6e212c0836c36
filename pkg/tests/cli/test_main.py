# tests/cli/test_main.py

import json

import pytest

from src.cli.main import EXIT_FATAL, EXIT_OK, EXIT_USAGE, build_parser, main

SMALL_RUN = """\
role: simulate
transport: sim
trainer:
  inner_steps: 4
  outer_steps: 3
  batch_size: 8
  seed: 2
  eval_batch_size: 32
  model: {d_in: 3, d_hidden: 4, d_out: 2}
sim:
  initial_nodes: 2
  default_link: {bandwidth_bps: 1.0e+8, latency_ms: 1.0}
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    """Keep the developer's .env and DILOCO_* variables out of the tests."""
    for name in (
        "DILOCO_METRICS_PATH",
        "DILOCO_SEED",
        "DILOCO_COORDINATOR",
        "DILOCO_LOG_LEVEL",
    ):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


class TestParser:
    def test_subcommands(self):
        parser = build_parser()
        args = parser.parse_args(["worker", "--node-id", "n1", "--nonblocking"])
        assert args.command == "worker"
        assert args.node_id == "n1"
        assert args.nonblocking is True
        assert parser.parse_args(["simulate"]).resume_on_fatal is None

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestSolveRing:
    def test_prints_order_and_objective(self, scenarios_dir, capsys):
        assert main(["solve-ring", str(scenarios_dir / "ring4.txt")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "order: 0 1 2 3" in out
        assert "objective: 10" in out

    def test_missing_matrix_is_usage_error(self, tmp_path, capsys):
        assert main(["solve-ring", str(tmp_path / "none.txt")]) == EXIT_USAGE
        assert "cannot read" in capsys.readouterr().err

    def test_malformed_matrix_is_usage_error(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("node a b\na 0 x\nb 1 0\n")
        assert main(["solve-ring", str(path)]) == EXIT_USAGE


class TestSimulateCommand:
    """End-to-end ``simulate`` on a tiny mesh."""

    def test_summary_and_metrics(self, tmp_path, capsys):
        config = tmp_path / "run.yaml"
        config.write_text(SMALL_RUN)
        metrics = tmp_path / "out" / "metrics.jsonl"
        code = main(
            [
                "--log-level",
                "WARNING",
                "simulate",
                "--config",
                str(config),
                "--metrics",
                str(metrics),
            ]
        )
        assert code == EXIT_OK
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["rounds"] == 3
        assert summary["replicas_agree"] is True
        assert summary["crashed"] == []
        assert summary["resumed_from"] is None
        assert len(metrics.read_text().splitlines()) == 2 * 3

    def test_baseline_flag(self, tmp_path, capsys):
        config = tmp_path / "run.yaml"
        config.write_text(SMALL_RUN)
        assert main(["simulate", "--config", str(config), "--baseline"]) == EXIT_OK
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["baseline_eval_loss"] > 0

    def test_invalid_config_is_usage_error(self, tmp_path, capsys):
        config = tmp_path / "run.yaml"
        config.write_text("trainer:\n  outer_steps: 0\n")
        assert main(["simulate", "--config", str(config)]) == EXIT_USAGE
        assert "trainer.outer_steps" in capsys.readouterr().err

    def test_unknown_log_level_is_usage_error(self):
        assert main(["--log-level", "LOUD", "solve-ring", "x"]) == EXIT_USAGE

    def test_mesh_failure_exit_code(self, tmp_path, scenarios_dir):
        config = tmp_path / "run.yaml"
        config.write_text(
            (scenarios_dir / "mass_failure.yaml")
            .read_text()
            .replace("resume_on_fatal: true", "resume_on_fatal: false")
            .replace("out/mass_failure_checkpoints", str(tmp_path / "ckpt"))
        )
        assert main(["simulate", "--config", str(config)]) == EXIT_FATAL


class TestBenchCommand:
    def test_csv_output(self, capsys):
        args = ["bench-allreduce", "--sizes", "512", "--k", "3", "--modes", "fp32"]
        code = main(args + ["--csv"])
        assert code == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("size,mode,k,makespan_s")
        assert lines[1].startswith("512,fp32,3,")
