# src/core/numerics/schedule.py

"""Warmup-stable-decay learning-rate multiplier."""

import math

import numpy as np

from src.core.errors import RangeError
from src.core.numerics.optim import HyperParams


def cooldown_start(hp: HyperParams) -> int:
    """First step of the linear cooldown."""
    total = _total(hp)
    return total - int(math.floor(hp.cooldown_fraction * total + 0.5))


def wsd_lr_scale(step: int, hp: HyperParams) -> float:
    """Return the lr multiplier in ``[0, 1]`` for global inner ``step``.

    Linear ramp from 0 to 1 over ``warmup_steps``, exactly 1.0 during the
    stable phase, then linear decay reaching 0 at ``total_steps``. If warmup
    and cooldown overlap, the smaller of the two ramps applies.

    Raises:
        RangeError: If ``step`` is negative or past ``total_steps``.
    """
    total = _total(hp)
    if step < 0 or step > total:
        raise RangeError(f"step {step} outside [0, {total}]")
    scale = 1.0
    if hp.warmup_steps > 0 and step < hp.warmup_steps:
        scale = step / hp.warmup_steps
    decay_from = cooldown_start(hp)
    if step > decay_from:
        scale = min(scale, (total - step) / (total - decay_from))
    return float(np.float32(scale))


def _total(hp: HyperParams) -> int:
    if hp.total_steps is None:
        raise RangeError("total_steps must be set before scheduling")
    return hp.total_steps
