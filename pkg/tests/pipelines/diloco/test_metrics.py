# tests/pipelines/diloco/test_metrics.py

import pytest

from src.core.errors import RangeError
from src.pipelines.diloco import (
    MetricsSink,
    RoundMetrics,
    comm_reduction_factor,
    compute_utilization,
    read_metrics,
)


def _record(step=0, node="node0", inner_time=1.0, allreduce_time=0.25, **extra):
    values = dict(
        node_id=node,
        outer_step=step,
        epoch=1,
        world_size=4,
        mean_inner_loss=0.5,
        eval_loss=0.4,
        inner_time=inner_time,
        allreduce_time=allreduce_time,
        bytes_sent=1000,
        bytes_received=1000,
        lr_scale=1.0,
        inner_steps=50,
        param_hash="ab" * 32,
    )
    values.update(extra)
    return RoundMetrics(**values)


class TestRoundMetrics:
    def test_skipped_inner_phase_has_no_loss(self):
        record = _record(mean_inner_loss=None, inner_steps=0)
        assert record.mean_inner_loss is None
        assert record.attempts == 1

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            _record(world_size=0)
        with pytest.raises(ValueError):
            _record(lr_scale=1.5)


class TestMetricsSink:
    """In-memory collection and JSON-lines output."""

    def test_memory_only(self):
        sink = MetricsSink()
        sink.emit(_record())
        assert sink.path is None
        assert len(sink.records) == 1

    def test_writes_and_reads_back(self, tmp_path):
        path = tmp_path / "out" / "metrics.jsonl"
        sink = MetricsSink(path)
        sink.extend([_record(step=0), _record(step=1, node="node1")])
        assert path.is_file()
        assert len(path.read_text().splitlines()) == 2
        assert read_metrics(path) == sink.records

    def test_appends_across_sinks(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        MetricsSink(path).emit(_record(step=0))
        MetricsSink(path).emit(_record(step=1))
        assert [r.outer_step for r in read_metrics(path)] == [0, 1]


class TestCommunicationAccounting:
    def test_reduction_factor(self):
        assert comm_reduction_factor(1, "fp32") == 1.0
        assert comm_reduction_factor(50, "fp32") == 50.0
        assert comm_reduction_factor(50, "int8") == 200.0

    def test_reduction_factor_rejects_bad_input(self):
        with pytest.raises(RangeError, match="inner_steps"):
            comm_reduction_factor(0, "fp32")
        with pytest.raises(RangeError, match="unknown mode"):
            comm_reduction_factor(10, "fp16")

    def test_compute_utilization(self):
        records = [_record(), _record(step=1, inner_time=3.0, allreduce_time=0.75)]
        assert compute_utilization(records) == pytest.approx(0.8)
        assert compute_utilization([_record(inner_time=0, allreduce_time=0)]) == 1.0
        with pytest.raises(ValueError):
            compute_utilization([])
