# tests/core/numerics/test_optim.py

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.errors import NumericError, RangeError, StructuralError
from src.core.numerics import (
    AdamWState,
    HyperParams,
    ModelParams,
    NesterovState,
    adamw_step,
    compute_pseudo_gradient,
    nesterov_outer_step,
)
from tests.conftest import scalar_params


class TestHyperParams:
    """Optimizer constants."""

    def test_defaults(self):
        hp = HyperParams()
        assert hp.inner_lr == 7.5e-5
        assert hp.outer_lr == 0.7
        assert hp.outer_momentum == 0.9
        assert hp.cooldown_fraction == 0.2

    @pytest.mark.parametrize(
        "field,value",
        [
            ("beta1", 1.0),
            ("beta2", -0.1),
            ("inner_lr", 0.0),
            ("cooldown_fraction", 1.0),
        ],
    )
    def test_out_of_range_rejected(self, field, value):
        with pytest.raises(ValidationError):
            HyperParams(**{field: value})

    def test_frozen(self):
        with pytest.raises(ValidationError):
            HyperParams().inner_lr = 1.0


class TestAdamWStep:
    """Inner optimizer."""

    def test_zero_gradient_applies_only_weight_decay(self):
        hp = HyperParams(inner_lr=0.1, weight_decay=0.1)
        params = scalar_params(1.0)
        updated, state = adamw_step(
            params, scalar_params(0.0), AdamWState.zeros(params), hp, 1.0
        )
        assert float(updated["theta"][0]) == pytest.approx(1.0 - 0.1 * 0.1, rel=1e-6)
        assert state.step == 1

    def test_first_step_scalar_reference(self):
        hp = HyperParams(inner_lr=0.1, weight_decay=0.0, eps=1e-8)
        params = scalar_params(0.0)
        updated, state = adamw_step(
            params, scalar_params(1.0), AdamWState.zeros(params), hp, 1.0
        )
        assert float(state.m["theta"][0]) == pytest.approx(0.1, rel=1e-6)
        assert float(state.v["theta"][0]) == pytest.approx(0.05, rel=1e-6)
        assert float(updated["theta"][0]) == pytest.approx(-0.1, rel=1e-5)

    def test_lr_scale_multiplies_step(self):
        hp = HyperParams(inner_lr=0.1, weight_decay=0.0)
        params = scalar_params(0.0)
        updated, _ = adamw_step(
            params, scalar_params(1.0), AdamWState.zeros(params), hp, 0.5
        )
        assert float(updated["theta"][0]) == pytest.approx(-0.05, rel=1e-5)

    def test_replicas_stay_bit_identical(self, rng):
        hp = HyperParams(inner_lr=1e-2)
        params = ModelParams([("w", rng.standard_normal((4, 3)))]).astype(np.float32)
        grads = ModelParams([("w", rng.standard_normal((4, 3)))]).astype(np.float32)
        a, sa = adamw_step(params.copy(), grads, AdamWState.zeros(params), hp, 0.7)
        b, sb = adamw_step(params.copy(), grads, AdamWState.zeros(params), hp, 0.7)
        assert a.bit_equal(b)
        assert sa.m.bit_equal(sb.m) and sa.v.bit_equal(sb.v)

    def test_inputs_not_mutated(self, rng):
        params = ModelParams([("w", rng.standard_normal(5).astype(np.float32))])
        before = params.copy()
        adamw_step(params, params, AdamWState.zeros(params), HyperParams(), 1.0)
        assert params.bit_equal(before)

    def test_non_finite_gradient_names_parameter(self):
        params = scalar_params(0.0)
        grads = scalar_params(float("nan"))
        with pytest.raises(NumericError, match="parameter 'theta'") as excinfo:
            adamw_step(params, grads, AdamWState.zeros(params), HyperParams(), 1.0)
        assert excinfo.value.name == "theta"

    def test_shape_mismatch(self):
        params = scalar_params(0.0)
        grads = ModelParams([("theta", np.zeros(2, dtype=np.float32))])
        with pytest.raises(StructuralError):
            adamw_step(params, grads, AdamWState.zeros(params), HyperParams(), 1.0)

    def test_lr_scale_range(self):
        params = scalar_params(0.0)
        with pytest.raises(RangeError, match="outside"):
            adamw_step(params, params, AdamWState.zeros(params), HyperParams(), 1.5)


class TestPseudoGradient:
    """theta_prev - theta_local."""

    def test_identical_inputs_give_zero(self, rng):
        params = ModelParams([("w", rng.standard_normal(6).astype(np.float32))])
        delta = compute_pseudo_gradient(params, params.copy())
        assert not np.any(delta["w"])

    def test_elementwise_difference(self):
        prev = ModelParams([("w", np.array([1.0, 1.0], dtype=np.float32))])
        local = ModelParams([("w", np.array([0.0, 2.0], dtype=np.float32))])
        delta = compute_pseudo_gradient(prev, local)
        np.testing.assert_array_equal(delta["w"], [1.0, -1.0])

    def test_adding_back_recovers_previous(self, rng):
        prev = ModelParams([("w", rng.standard_normal(100).astype(np.float32))])
        local = ModelParams([("w", rng.standard_normal(100).astype(np.float32))])
        delta = compute_pseudo_gradient(prev, local)
        np.testing.assert_allclose(delta["w"] + local["w"], prev["w"], atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(StructuralError, match="pseudo-gradient"):
            compute_pseudo_gradient(
                scalar_params(0.0), ModelParams([("theta", np.zeros(3))])
            )


class TestNesterovOuterStep:
    """Outer optimizer: b <- mu*b + delta; theta <- theta - lr*(delta + mu*b)."""

    def test_scalar_reference(self):
        hp = HyperParams(outer_lr=0.7, outer_momentum=0.9)
        params = scalar_params(10.0)
        updated, state = nesterov_outer_step(
            params, scalar_params(1.0), NesterovState.zeros(params), hp
        )
        assert float(state.buffer["theta"][0]) == pytest.approx(1.0)
        assert float(updated["theta"][0]) == pytest.approx(8.67, rel=1e-6)

    def test_momentum_accumulates(self):
        hp = HyperParams(outer_lr=0.7, outer_momentum=0.9)
        params = scalar_params(10.0)
        delta = scalar_params(1.0)
        params, state = nesterov_outer_step(
            params, delta, NesterovState.zeros(params), hp
        )
        params, state = nesterov_outer_step(params, delta, state, hp)
        assert float(state.buffer["theta"][0]) == pytest.approx(1.9, rel=1e-6)
        expected = 8.67 - 0.7 * (1.0 + 0.9 * 1.9)
        assert float(params["theta"][0]) == pytest.approx(expected, rel=1e-6)

    def test_plain_sgd_recovers_local_training(self, rng):
        hp = HyperParams(outer_lr=1.0, outer_momentum=0.0)
        prev = ModelParams([("w", rng.standard_normal(20).astype(np.float32))])
        local = ModelParams([("w", rng.standard_normal(20).astype(np.float32))])
        delta = compute_pseudo_gradient(prev, local)
        updated, _ = nesterov_outer_step(prev, delta, NesterovState.zeros(prev), hp)
        np.testing.assert_allclose(updated["w"], local["w"], atol=1e-5)

    def test_zero_delta_keeps_params(self, rng):
        params = ModelParams([("w", rng.standard_normal(8).astype(np.float32))])
        updated, _ = nesterov_outer_step(
            params, params.zeros_like(), NesterovState.zeros(params), HyperParams()
        )
        assert updated.bit_equal(params)

    def test_shape_mismatch(self):
        params = scalar_params(0.0)
        with pytest.raises(StructuralError, match="outer delta"):
            nesterov_outer_step(
                params,
                ModelParams([("theta", np.zeros(2))]),
                NesterovState.zeros(params),
                HyperParams(),
            )
