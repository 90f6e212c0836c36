# tests/cli/test_simulate.py

import pytest

from src.cli.config import load_run_config
from src.cli.simulate import Simulation, run_scenario, summarize_rounds
from src.core.errors import FatalTrainingError
from src.pipelines.diloco import MetricsSink, RoundMetrics


def _record(node, step, world_size, param_hash, loss=0.5):
    return RoundMetrics(
        node_id=node,
        outer_step=step,
        epoch=1,
        world_size=world_size,
        mean_inner_loss=loss,
        eval_loss=0.4,
        inner_time=1.0,
        allreduce_time=0.1,
        bytes_sent=100,
        bytes_received=100,
        lr_scale=1.0,
        inner_steps=10,
        param_hash=param_hash,
    )


class TestSummarizeRounds:
    """Per-round table built from node records."""

    def test_empty(self):
        frame = summarize_rounds([])
        assert len(frame) == 0
        assert "replicas_agree" in frame.columns

    def test_groups_by_outer_step(self):
        records = [
            _record("a", 0, 2, "h0"),
            _record("b", 0, 2, "h0", loss=0.7),
            _record("a", 1, 2, "h1"),
            _record("b", 1, 2, "h2"),
        ]
        frame = summarize_rounds(records)
        assert list(frame["outer_step"]) == [0, 1]
        assert list(frame["nodes"]) == [2, 2]
        assert frame["mean_inner_loss"].iloc[0] == pytest.approx(0.6)
        assert list(frame["bytes_sent"]) == [200, 200]
        assert list(frame["replicas_agree"]) == [True, False]

    def test_skipped_inner_phase_excluded_from_mean(self):
        records = [_record("a", 0, 2, "h"), _record("b", 0, 2, "h", loss=None)]
        frame = summarize_rounds(records)
        assert frame["mean_inner_loss"].iloc[0] == pytest.approx(0.5)


@pytest.mark.integration
class TestBundledScenarios:
    """The YAML scenarios shipped under work/scenarios."""

    def _load(self, scenarios_dir, name, **overrides):
        return load_run_config(scenarios_dir / name, overrides=overrides, env={})

    def test_join_crash(self, scenarios_dir):
        result = run_scenario(self._load(scenarios_dir, "join_crash.yaml"))
        assert result.world_sizes == [2] * 5 + [4] * 3 + [3] * 4
        assert result.crashed == ["node1"]
        assert sorted(result.finals) == ["node0", "node2", "node3"]
        assert result.replicas_agree

    def test_gradual_scale_up(self, scenarios_dir):
        result = run_scenario(self._load(scenarios_dir, "gradual_scale_up.yaml"))
        assert result.world_sizes == [2, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 6]
        assert len(result.finals) == 6
        assert result.replicas_agree

    def test_mass_failure_resumes_from_checkpoint(self, scenarios_dir, tmp_path):
        config = self._load(
            scenarios_dir,
            "mass_failure.yaml",
            **{"trainer.checkpoint_dir": str(tmp_path)},
        )
        result = Simulation(config, MetricsSink()).run()
        assert result.resumed_from == 4
        assert sorted(result.crashed) == ["node4", "node5"]
        assert result.world_sizes == [6, 6, 6, 6, 4, 4, 4, 4]
        assert sorted(result.finals) == ["node0", "node1", "node2", "node3"]
        assert result.replicas_agree
        assert (tmp_path / "node0" / "step_000008.ckpt").is_file()

    def test_mass_failure_without_resume_is_fatal(self, scenarios_dir, tmp_path):
        config = self._load(
            scenarios_dir,
            "mass_failure.yaml",
            **{"trainer.checkpoint_dir": str(tmp_path), "sim.resume_on_fatal": False},
        )
        with pytest.raises(FatalTrainingError):
            run_scenario(config)

    @pytest.mark.slow
    def test_no_churn_writes_metrics(self, scenarios_dir, tmp_path):
        path = tmp_path / "metrics.jsonl"
        config = self._load(scenarios_dir, "no_churn.yaml", metrics_path=str(path))
        result = run_scenario(config)
        assert result.world_sizes == [4] * 20
        assert result.replicas_agree
        assert len(path.read_text().splitlines()) == 4 * 20
