# src/pipelines/diloco/baseline.py

"""Fully synchronous data-parallel reference run.

``k`` simulated replicas each take one batch from their own shard per step;
their gradients are averaged in shard order and a single AdamW step is
applied. This is the communication-heavy setting DiLoCo is compared with:
one fp32 all-reduce of the gradient per inner step.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from src.core.errors import RangeError
from src.core.numerics import (
    AdamWState,
    ModelParams,
    RngState,
    adamw_step,
    eval_batch,
    init_toy_params,
    synth_batch,
    toy_forward_backward,
    toy_loss,
    wsd_lr_scale,
)
from src.pipelines.diloco.config import TrainerConfig

logger = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    params: ModelParams
    train_losses: List[float] = field(default_factory=list)
    eval_losses: List[float] = field(default_factory=list)
    syncs: int = 0


def _mean_grads(grads: List[ModelParams]) -> ModelParams:
    k = np.float32(len(grads))
    first = grads[0]
    averaged = []
    for name, _ in first.items():
        total = first[name].copy()
        for other in grads[1:]:
            total = total + other[name]
        averaged.append((name, total / k))
    return ModelParams(averaged)


def run_data_parallel_baseline(config: TrainerConfig, k: int) -> BaselineResult:
    """Train for ``inner_steps * outer_steps`` synchronous steps on ``k`` shards.

    The held-out loss is recorded every ``inner_steps`` steps so it lines up
    with the DiLoCo round records.
    """
    if k < 1:
        raise RangeError(f"k must be >= 1, got {k}")
    params = init_toy_params(config.model, config.seed)
    adam = AdamWState.zeros(params)
    rng = RngState(config.seed)
    held_out = eval_batch(config.seed, config.eval_batch_size, config.model)
    result = BaselineResult(params)

    for step in range(config.total_inner_steps):
        scale = wsd_lr_scale(step, config.hyper)
        losses, grads = [], []
        for shard in range(k):
            shard_id = 0 if config.identical_shards else shard
            batch = synth_batch(rng.at(step), shard_id, config.batch_size, config.model)
            loss, grad = toy_forward_backward(params, batch)
            losses.append(loss)
            grads.append(grad)
        params, adam = adamw_step(params, _mean_grads(grads), adam, config.hyper, scale)
        result.train_losses.append(float(np.mean(losses)))
        result.syncs += 1
        if (step + 1) % config.inner_steps == 0:
            result.eval_losses.append(toy_loss(params, held_out))

    result.params = params
    logger.info(
        f"data-parallel baseline: k={k}, {result.syncs} syncs, "
        f"final eval loss {result.eval_losses[-1]:.5f}"
    )
    return result
