"""
Deterministic numerics for DiLoCo training.

Key Features:
- Ordered parameter sets with canonical serialization and hashing
- Counter-based random streams (Philox) for reproducible shards
- AdamW inner optimizer, Nesterov outer optimizer, pseudo-gradients
- Warmup-stable-decay learning-rate schedule
- A small tanh MLP regression problem with exact gradients
"""

from .tensor import (
    ModelParams,
    as_tensor,
    check_finite,
    decode_tensor,
    encode_tensor,
    params_from_dict,
)
from .rng import RngState
from .optim import (
    AdamWState,
    HyperParams,
    NesterovState,
    adamw_step,
    compute_pseudo_gradient,
    nesterov_outer_step,
)
from .schedule import cooldown_start, wsd_lr_scale
from .toy_model import (
    Batch,
    ToyModelSpec,
    eval_batch,
    init_toy_params,
    synth_batch,
    toy_forward_backward,
    toy_loss,
)

__all__ = [
    # Tensors
    "ModelParams",
    "as_tensor",
    "check_finite",
    "decode_tensor",
    "encode_tensor",
    "params_from_dict",
    # Randomness
    "RngState",
    # Optimizers
    "AdamWState",
    "HyperParams",
    "NesterovState",
    "adamw_step",
    "compute_pseudo_gradient",
    "nesterov_outer_step",
    # Schedule
    "cooldown_start",
    "wsd_lr_scale",
    # Toy problem
    "Batch",
    "ToyModelSpec",
    "eval_batch",
    "init_toy_params",
    "synth_batch",
    "toy_forward_backward",
    "toy_loss",
]
