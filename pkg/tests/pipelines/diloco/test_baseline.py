# tests/pipelines/diloco/test_baseline.py

import pytest

from src.core.errors import RangeError
from src.core.numerics import eval_batch, init_toy_params, toy_loss
from src.pipelines.diloco import TrainerConfig, run_data_parallel_baseline


class TestDataParallelBaseline:
    """Per-step gradient averaging used as the comparison run."""

    def test_one_sync_per_step(self, tiny_trainer):
        result = run_data_parallel_baseline(tiny_trainer, 2)
        assert result.syncs == tiny_trainer.total_inner_steps
        assert len(result.train_losses) == tiny_trainer.total_inner_steps
        assert len(result.eval_losses) == tiny_trainer.outer_steps

    def test_training_lowers_held_out_loss(self, tiny_trainer):
        config = TrainerConfig(
            inner_steps=10,
            outer_steps=10,
            batch_size=8,
            seed=3,
            model=tiny_trainer.model,
            eval_batch_size=32,
        )
        held_out = eval_batch(config.seed, config.eval_batch_size, config.model)
        start = toy_loss(init_toy_params(config.model, config.seed), held_out)
        result = run_data_parallel_baseline(config, 4)
        assert result.eval_losses[-1] < start

    def test_identical_shards_reduce_to_one_replica(self, tiny_trainer):
        config = tiny_trainer.model_copy(update={"identical_shards": True})
        single = run_data_parallel_baseline(config, 1)
        many = run_data_parallel_baseline(config, 4)
        assert many.params.bit_equal(single.params)

    def test_deterministic(self, tiny_trainer):
        a = run_data_parallel_baseline(tiny_trainer, 3)
        b = run_data_parallel_baseline(tiny_trainer, 3)
        assert a.params.digest() == b.params.digest()
        assert a.eval_losses == b.eval_losses

    def test_rejects_empty_mesh(self, tiny_trainer):
        with pytest.raises(RangeError, match="k must be >= 1"):
            run_data_parallel_baseline(tiny_trainer, 0)
