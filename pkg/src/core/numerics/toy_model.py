# src/core/numerics/toy_model.py

"""Built-in regression problem: a 2-layer tanh MLP fitting a fixed target MLP.

Parameters are ``w1 (hidden, in)``, ``b1 (hidden,)``, ``w2 (out, hidden)``,
``b2 (out,)``. The target network is drawn once from the run seed; each
shard samples its own inputs and target noise from an independent stream.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.errors import NumericError, StructuralError
from src.core.numerics.rng import RngState
from src.core.numerics.tensor import ModelParams

# Reserved streams, far above any shard id.
TARGET_STREAM = 1 << 63
INIT_STREAM = TARGET_STREAM + 1
EVAL_STREAM = TARGET_STREAM + 2

PARAM_ORDER = ("w1", "b1", "w2", "b2")


class ToyModelSpec(BaseModel):
    """Dimensions of the trained and target MLPs and the target noise."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    d_in: int = Field(default=8, ge=1, description="Input features")
    d_hidden: int = Field(default=32, ge=1, description="Hidden tanh units")
    d_out: int = Field(default=4, ge=1, description="Regression outputs")
    noise_std: float = Field(default=0.1, ge=0, description="Gaussian target noise")

    @property
    def num_params(self) -> int:
        return self.d_hidden * (self.d_in + 1) + self.d_out * (self.d_hidden + 1)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


def _mlp_weights(gen: np.random.Generator, spec: ToyModelSpec) -> ModelParams:
    w1 = gen.standard_normal((spec.d_hidden, spec.d_in), dtype=np.float32)
    w2 = gen.standard_normal((spec.d_out, spec.d_hidden), dtype=np.float32)
    return ModelParams(
        [
            ("w1", w1 / np.float32(np.sqrt(spec.d_in))),
            ("b1", np.zeros(spec.d_hidden, dtype=np.float32)),
            ("w2", w2 / np.float32(np.sqrt(spec.d_hidden))),
            ("b2", np.zeros(spec.d_out, dtype=np.float32)),
        ]
    )


def init_toy_params(spec: ToyModelSpec, seed: int) -> ModelParams:
    """Initial student parameters; identical on every node for one seed."""
    return _mlp_weights(RngState(seed).generator(INIT_STREAM), spec)


@lru_cache(maxsize=32)
def _target_net(spec: ToyModelSpec, seed: int) -> ModelParams:
    gen = RngState(seed).generator(TARGET_STREAM)
    target = _mlp_weights(gen, spec)
    bias = gen.standard_normal(spec.d_hidden, dtype=np.float32) * np.float32(0.1)
    return ModelParams(
        [
            ("w1", target["w1"]),
            ("b1", bias),
            ("w2", target["w2"]),
            ("b2", target["b2"]),
        ]
    )


def _forward(params: ModelParams, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    hidden = np.tanh(inputs @ params["w1"].T + params["b1"])
    return hidden, hidden @ params["w2"].T + params["b2"]


def synth_batch(
    rng: RngState,
    shard_id: int,
    batch_size: int,
    spec: ToyModelSpec = ToyModelSpec(),
) -> Batch:
    """Draw the batch at position ``rng.counter`` of shard ``shard_id``.

    The batch depends only on ``(rng.seed, shard_id, rng.counter)``.
    """
    if shard_id < 0:
        raise StructuralError(f"shard_id must be non-negative, got {shard_id}")
    return _sample(rng, shard_id, batch_size, spec)


def eval_batch(
    seed: int, batch_size: int, spec: ToyModelSpec = ToyModelSpec()
) -> Batch:
    """Fixed held-out batch drawn from a reserved stream."""
    return _sample(RngState(seed), EVAL_STREAM, batch_size, spec)


def _sample(rng: RngState, stream: int, batch_size: int, spec: ToyModelSpec) -> Batch:
    gen = rng.generator(stream)
    inputs = gen.standard_normal((batch_size, spec.d_in), dtype=np.float32)
    noise = gen.standard_normal((batch_size, spec.d_out), dtype=np.float32)
    _, clean = _forward(_target_net(spec, rng.seed), inputs)
    targets = clean + np.float32(spec.noise_std) * noise
    return Batch(inputs=inputs, targets=targets.astype(np.float32))


def toy_forward_backward(
    params: ModelParams, batch: Batch
) -> Tuple[float, ModelParams]:
    """Mean-squared error and its exact gradients.

    Computation runs in the parameters' dtype, so float64 parameters give a
    float64 reference for finite-difference checks.

    Raises:
        StructuralError: If the batch does not fit the parameter shapes.
        NumericError: If an activation or the loss is non-finite.
    """
    dtype = params.dtype
    w1, w2 = params["w1"], params["w2"]
    x = batch.inputs.astype(dtype, copy=False)
    t = batch.targets.astype(dtype, copy=False)
    if x.ndim != 2 or x.shape[1] != w1.shape[1]:
        raise StructuralError(f"inputs {x.shape} do not match w1 {w1.shape}")
    if t.shape != (x.shape[0], w2.shape[0]):
        raise StructuralError(
            f"targets {t.shape} do not match outputs of w2 {w2.shape}"
        )

    hidden, out = _forward(params, x)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite activation in toy model output", name="output")
    diff = out - t
    count = dtype.type(diff.size)
    loss = np.sum(diff * diff) / count

    d_out = (dtype.type(2.0) / count) * diff
    d_hidden = (d_out @ w2) * (dtype.type(1.0) - hidden * hidden)
    grads = ModelParams(
        [
            ("w1", d_hidden.T @ x),
            ("b1", d_hidden.sum(axis=0)),
            ("w2", d_out.T @ hidden),
            ("b2", d_out.sum(axis=0)),
        ]
    )
    if not np.isfinite(loss):
        raise NumericError("non-finite toy loss", name="loss")
    return float(loss), grads


def toy_loss(params: ModelParams, batch: Batch) -> float:
    _, out = _forward(params, batch.inputs.astype(params.dtype, copy=False))
    diff = out - batch.targets.astype(params.dtype, copy=False)
    return float(np.mean(diff * diff))
