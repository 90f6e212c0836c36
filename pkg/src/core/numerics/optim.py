# src/core/numerics/optim.py

"""Inner (AdamW) and outer (Nesterov) optimizers and pseudo-gradients.

All kernels are pure: they never mutate their inputs and always return new
arrays, so applying them to copies on different nodes yields bit-identical
results. Arithmetic stays in fp32 with numpy scalars so no silent upcast
changes the rounding.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.core.errors import NumericError, RangeError
from src.core.numerics.tensor import ModelParams

logger = logging.getLogger(__name__)


class HyperParams(BaseModel):
    """Optimizer constants for the inner and outer loops."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    inner_lr: float = Field(
        default=7.5e-5, gt=0, description="Peak AdamW learning rate"
    )
    beta1: float = Field(
        default=0.9, ge=0, lt=1, description="AdamW first-moment decay"
    )
    beta2: float = Field(
        default=0.95, ge=0, lt=1, description="AdamW second-moment decay"
    )
    eps: float = Field(default=1e-8, gt=0, description="AdamW denominator epsilon")
    weight_decay: float = Field(default=0.1, ge=0, description="Decoupled weight decay")
    outer_lr: float = Field(
        default=0.7, gt=0, description="Outer Nesterov learning rate"
    )
    outer_momentum: float = Field(
        default=0.9, ge=0, lt=1, description="Outer Nesterov momentum"
    )
    warmup_steps: int = Field(default=1000, ge=0, description="Linear warmup length")
    total_steps: Optional[int] = Field(
        default=None, ge=1, description="Total inner steps; filled in from H x T"
    )
    cooldown_fraction: float = Field(
        default=0.2, ge=0, lt=1, description="Fraction of training spent cooling down"
    )

    @field_validator("inner_lr", "outer_lr")
    @classmethod
    def _finite_lr(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("learning rates must be finite")
        return value


@dataclass(frozen=True)
class AdamWState:
    """Per-node inner optimizer state."""

    step: int
    m: ModelParams
    v: ModelParams

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamWState":
        return cls(step=0, m=params.zeros_like(), v=params.zeros_like())


@dataclass(frozen=True)
class NesterovState:
    """Outer momentum buffer, replicated on every node."""

    buffer: ModelParams

    @classmethod
    def zeros(cls, params: ModelParams) -> "NesterovState":
        return cls(buffer=params.zeros_like())


def adamw_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamWState,
    hp: HyperParams,
    lr_scale: float,
) -> Tuple[ModelParams, AdamWState]:
    """Apply one AdamW update with bias correction and decoupled weight decay.

    Args:
        params: Current parameters.
        grads: Gradients shaped like ``params``.
        state: Moments and step counter for ``params``.
        hp: Optimizer constants.
        lr_scale: Schedule multiplier in ``[0, 1]``.

    Returns:
        ``(new_params, new_state)`` with ``new_state.step == state.step + 1``.

    Raises:
        StructuralError: If shapes disagree.
        NumericError: If a gradient is non-finite; names the parameter.
        RangeError: If ``lr_scale`` lies outside ``[0, 1]``.
    """
    params.check_same_structure(grads, "adamw grads")
    params.check_same_structure(state.m, "adamw first moment")
    params.check_same_structure(state.v, "adamw second moment")
    if not 0.0 <= lr_scale <= 1.0:
        raise RangeError(f"lr_scale {lr_scale} outside [0, 1]")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'", name=name)

    dtype = params.dtype.type
    step = state.step + 1
    lr = dtype(hp.inner_lr) * dtype(lr_scale)
    b1, b2 = dtype(hp.beta1), dtype(hp.beta2)
    one = dtype(1.0)
    bias1 = dtype(1.0 - hp.beta1**step)
    bias2 = dtype(1.0 - hp.beta2**step)
    eps = dtype(hp.eps)
    decay = one - lr * dtype(hp.weight_decay)

    new_params, new_m, new_v = [], [], []
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (one - b1) * g
        v = b2 * state.v[name] + (one - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        updated = p * decay - lr * (m_hat / (np.sqrt(v_hat) + eps))
        new_params.append((name, updated))
        new_m.append((name, m))
        new_v.append((name, v))

    return ModelParams(new_params), AdamWState(
        step=step, m=ModelParams(new_m), v=ModelParams(new_v)
    )


def compute_pseudo_gradient(
    theta_prev: ModelParams, theta_local: ModelParams
) -> ModelParams:
    """Return ``theta_prev - theta_local`` elementwise."""
    theta_prev.check_same_structure(theta_local, "pseudo-gradient")
    return ModelParams(
        (name, prev - theta_local[name]) for name, prev in theta_prev.items()
    )


def nesterov_outer_step(
    params: ModelParams,
    avg_delta: ModelParams,
    state: NesterovState,
    hp: HyperParams,
) -> Tuple[ModelParams, NesterovState]:
    """Apply the outer Nesterov update to the shared parameters.

    ``b <- mu * b + delta`` then ``theta <- theta - lr * (delta + mu * b)``.
    """
    params.check_same_structure(avg_delta, "outer delta")
    params.check_same_structure(state.buffer, "outer momentum buffer")
    dtype = params.dtype.type
    mu = dtype(hp.outer_momentum)
    lr = dtype(hp.outer_lr)

    new_params, new_buffer = [], []
    for name, p in params.items():
        delta = avg_delta[name]
        b = mu * state.buffer[name] + delta
        new_params.append((name, p - lr * (delta + mu * b)))
        new_buffer.append((name, b))
    return ModelParams(new_params), NesterovState(buffer=ModelParams(new_buffer))
