# tests/core/numerics/test_tensor.py

import numpy as np
import pytest

from src.core.errors import DecodeError, NumericError, StructuralError
from src.core.numerics import (
    ModelParams,
    as_tensor,
    decode_tensor,
    encode_tensor,
    params_from_dict,
)


def _params(rng: np.random.Generator) -> ModelParams:
    return ModelParams(
        [
            ("w", rng.standard_normal((3, 2)).astype(np.float32)),
            ("b", rng.standard_normal(3).astype(np.float32)),
        ]
    )


class TestAsTensor:
    """Coercion into finite contiguous fp32 arrays."""

    def test_converts_lists_to_float32(self):
        arr = as_tensor([[1, 2], [3, 4]])
        assert arr.dtype == np.float32
        assert arr.flags["C_CONTIGUOUS"]

    def test_rejects_nan(self):
        with pytest.raises(NumericError, match="non-finite values in 'grad'"):
            as_tensor([1.0, np.nan], name="grad")


class TestModelParams:
    """Ordered parameter sets."""

    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.params = _params(self.rng)

    def test_preserves_insertion_order(self):
        assert self.params.names() == ["w", "b"]
        assert self.params.numel == 9

    def test_duplicate_names_rejected(self):
        with pytest.raises(StructuralError, match="duplicate parameter name 'w'"):
            ModelParams([("w", np.zeros(2)), ("w", np.zeros(2))])

    def test_zero_extent_rejected(self):
        with pytest.raises(StructuralError, match="non-positive extent"):
            ModelParams([("w", np.zeros((0, 2)))])

    def test_flatten_then_unflatten_restores_values(self):
        flat = self.params.flatten()
        assert flat.shape == (9,)
        assert self.params.unflatten(flat).bit_equal(self.params)

    def test_unflatten_wrong_size(self):
        with pytest.raises(StructuralError, match="cannot fill 9 elements"):
            self.params.unflatten(np.zeros(8, dtype=np.float32))

    def test_bytes_round_trip_is_bit_exact(self):
        restored, offset = ModelParams.from_bytes(self.params.to_bytes())
        assert offset == len(self.params.to_bytes())
        assert restored.bit_equal(self.params)
        assert restored.digest() == self.params.digest()

    def test_order_changes_digest(self):
        values = {"w": self.params["w"], "b": self.params["b"]}
        reordered = params_from_dict(values, order=["b", "w"])
        assert reordered.digest() != self.params.digest()

    def test_truncated_bytes_raise_decode_error(self):
        data = self.params.to_bytes()
        with pytest.raises(DecodeError):
            ModelParams.from_bytes(data[:-3])

    def test_structure_mismatch(self):
        other = ModelParams([("w", np.zeros((2, 3))), ("b", np.zeros(3))])
        with pytest.raises(StructuralError, match="adamw grads"):
            self.params.check_same_structure(other, "adamw grads")

    def test_check_finite_names_parameter(self):
        bad = self.params.map(
            lambda name, arr: np.full_like(arr, np.inf) if name == "b" else arr
        )
        with pytest.raises(NumericError) as excinfo:
            bad.check_finite("outer step")
        assert excinfo.value.name == "b"

    def test_copy_is_independent(self):
        clone = self.params.copy()
        clone["w"][0, 0] += 1.0
        assert not clone.bit_equal(self.params)


class TestTensorCodec:
    """Single-tensor serialization."""

    def test_encode_decode(self):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        buf = encode_tensor("weights", arr)
        name, decoded, offset = decode_tensor(buf)
        assert name == "weights"
        assert offset == len(buf)
        np.testing.assert_array_equal(decoded, arr)

    def test_truncated_data(self):
        buf = encode_tensor("x", np.ones(4, dtype=np.float32))
        with pytest.raises(DecodeError, match="data truncated"):
            decode_tensor(buf[:-1])

    def test_name_past_end(self):
        with pytest.raises(DecodeError):
            decode_tensor(b"\xff\x00\x00\x00ab")
