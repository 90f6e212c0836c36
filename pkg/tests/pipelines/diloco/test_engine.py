# tests/pipelines/diloco/test_engine.py

from dataclasses import replace

import numpy as np
import pytest

from src.core.errors import NumericError
from src.core.numerics import (
    HyperParams,
    RngState,
    adamw_step,
    synth_batch,
    toy_forward_backward,
    wsd_lr_scale,
)
from src.pipelines.diloco import (
    TrainerConfig,
    WorkerState,
    apply_outer_step,
    pseudo_gradient,
    run_inner_phase,
)


class TestWorkerState:
    """Initial state, checkpoints and the shared digest."""

    def test_initial_state_is_a_boundary(self, tiny_trainer):
        state = WorkerState.initial(tiny_trainer, shard_id=2)
        assert state.outer_step == 0
        assert state.shard_id == 2
        assert state.params.bit_equal(state.retained)
        assert state.adam.step == 0
        assert not np.any(state.nesterov.buffer.flatten())

    def test_initial_state_same_for_every_node(self, tiny_trainer):
        a = WorkerState.initial(tiny_trainer, shard_id=0)
        b = WorkerState.initial(tiny_trainer, shard_id=1)
        assert a.shared_digest() == b.shared_digest()

    def test_checkpoint_round_trip(self, tiny_trainer):
        state = run_inner_phase(WorkerState.initial(tiny_trainer), tiny_trainer).state
        checkpoint = state.to_checkpoint(tiny_trainer.fingerprint())
        restored = WorkerState.from_checkpoint(checkpoint)
        assert restored.shared_digest() == state.shared_digest()
        assert restored.params.bit_equal(state.params)
        assert restored.data_position == state.data_position
        assert restored.adam.step == state.adam.step

    def test_digest_tracks_outer_step(self, tiny_trainer):
        state = WorkerState.initial(tiny_trainer)
        assert replace(state, outer_step=1).shared_digest() != state.shared_digest()


class TestInnerPhase:
    """H local AdamW steps on one shard."""

    def test_runs_inner_steps(self, tiny_trainer):
        start = WorkerState.initial(tiny_trainer)
        result = run_inner_phase(start, tiny_trainer)
        assert len(result.losses) == tiny_trainer.inner_steps
        assert result.state.data_position == tiny_trainer.inner_steps
        assert result.state.adam.step == tiny_trainer.inner_steps
        assert result.mean_loss == pytest.approx(np.mean(result.losses))
        assert 0.0 <= result.lr_scale <= 1.0

    def test_retained_copy_untouched(self, tiny_trainer):
        start = WorkerState.initial(tiny_trainer)
        result = run_inner_phase(start, tiny_trainer)
        assert result.state.retained.bit_equal(start.retained)
        assert not result.state.params.bit_equal(start.params)
        assert start.params.bit_equal(start.retained)

    def test_deterministic(self, tiny_trainer):
        start = WorkerState.initial(tiny_trainer)
        first = run_inner_phase(start, tiny_trainer)
        second = run_inner_phase(start, tiny_trainer)
        assert first.state.params.bit_equal(second.state.params)
        assert first.losses == second.losses

    def test_shards_see_different_data(self, tiny_trainer):
        a = run_inner_phase(WorkerState.initial(tiny_trainer, 0), tiny_trainer)
        b = run_inner_phase(WorkerState.initial(tiny_trainer, 1), tiny_trainer)
        assert not a.state.params.bit_equal(b.state.params)

    def test_identical_shards_ignore_shard_id(self, tiny_trainer):
        config = tiny_trainer.model_copy(update={"identical_shards": True})
        a = run_inner_phase(WorkerState.initial(config, 0), config)
        b = run_inner_phase(WorkerState.initial(config, 3), config)
        assert a.state.params.bit_equal(b.state.params)

    def test_non_finite_parameters_name_the_step(self, tiny_trainer):
        start = WorkerState.initial(tiny_trainer)
        broken = start.params.map(lambda _, arr: np.full_like(arr, np.nan))
        with pytest.raises(NumericError, match="round 0, inner step 0"):
            run_inner_phase(replace(start, params=broken), tiny_trainer)

    def test_no_inner_phase_means_zero_delta(self, tiny_trainer):
        state = WorkerState.initial(tiny_trainer)
        delta = pseudo_gradient(state)
        assert delta.numel == state.params.numel
        assert not np.any(delta.flatten())


class TestOuterStep:
    """Nesterov step from the retained parameters."""

    def test_ends_the_round_at_a_boundary(self, tiny_trainer):
        inner = run_inner_phase(WorkerState.initial(tiny_trainer), tiny_trainer)
        after = apply_outer_step(
            inner.state, pseudo_gradient(inner.state), tiny_trainer
        )
        assert after.outer_step == 1
        assert after.params.bit_equal(after.retained)
        assert after.data_position == inner.state.data_position
        assert after.adam.step == inner.state.adam.step

    def test_zero_average_keeps_parameters(self, tiny_trainer):
        state = WorkerState.initial(tiny_trainer)
        after = apply_outer_step(state, pseudo_gradient(state), tiny_trainer)
        assert after.params.bit_equal(state.params)

    def test_same_inputs_same_bits(self, tiny_trainer):
        inner = run_inner_phase(WorkerState.initial(tiny_trainer), tiny_trainer)
        delta = pseudo_gradient(inner.state)
        a = apply_outer_step(inner.state, delta, tiny_trainer)
        b = apply_outer_step(inner.state, delta, tiny_trainer)
        assert a.shared_digest() == b.shared_digest()

    def test_single_node_plain_outer_step_matches_local_training(self, small_model):
        """k=1, H=1, no momentum, outer lr 1: each round is one AdamW step."""
        hyper = HyperParams(
            inner_lr=1e-2,
            warmup_steps=20,
            weight_decay=0.01,
            outer_lr=1.0,
            outer_momentum=0.0,
        )
        config = TrainerConfig(
            inner_steps=1,
            outer_steps=100,
            batch_size=8,
            seed=3,
            model=small_model,
            hyper=hyper,
        )
        state = WorkerState.initial(config)
        params, adam = state.params, state.adam
        rng = RngState(config.seed)
        mismatched = []
        for t in range(config.outer_steps):
            inner = run_inner_phase(state, config)
            state = apply_outer_step(inner.state, pseudo_gradient(inner.state), config)

            batch = synth_batch(rng.at(t), 0, config.batch_size, config.model)
            _, grads = toy_forward_backward(params, batch)
            scale = wsd_lr_scale(t, config.hyper)
            params, adam = adamw_step(params, grads, adam, config.hyper, scale)
            if not state.params.bit_equal(params):
                mismatched.append(t)
        assert not mismatched
        assert state.retained.bit_equal(params)
