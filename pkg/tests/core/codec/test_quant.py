# tests/core/codec/test_quant.py

import struct

import numpy as np
import pytest

from src.core.errors import DecodeError, NumericError, StructuralError
from src.core.codec import (
    CLIP_SIGMAS,
    NUM_BUCKETS,
    QuantChunk,
    chunk_stats,
    decode_chunk,
    dequantize,
    encode_chunk,
    quantize,
)


class TestQuantize:
    """Codebook construction."""

    def test_two_values_round_trip_exactly(self):
        values = np.array([-1.0, 1.0], dtype=np.float32)
        chunk = quantize(values)
        assert chunk.indices.tolist() == [106, 149]
        np.testing.assert_array_equal(dequantize(chunk), values)

    def test_constant_chunk_is_exact(self):
        values = np.full(50, 3.25, dtype=np.float32)
        chunk = quantize(values)
        assert not np.any(chunk.indices)
        np.testing.assert_array_equal(dequantize(chunk), values)

    def test_single_element(self):
        chunk = quantize(np.array([0.5], dtype=np.float32))
        assert dequantize(chunk).tolist() == [0.5]

    def test_codebook_is_nondecreasing(self, rng):
        chunk = quantize(rng.standard_normal(5000).astype(np.float32))
        assert chunk.codebook.shape == (NUM_BUCKETS,)
        assert np.all(np.diff(chunk.codebook) >= 0)

    def test_gaussian_error_is_small(self, rng):
        values = rng.standard_normal(10_000).astype(np.float32)
        restored = dequantize(quantize(values))
        rmse = float(np.sqrt(np.mean((restored - values) ** 2)))
        assert rmse <= 0.02

    def test_error_bounded_by_bucket_width(self, rng):
        values = rng.standard_normal(2000).astype(np.float32)
        _, sigma = chunk_stats(values)
        width = 2 * CLIP_SIGMAS * sigma / NUM_BUCKETS
        restored = dequantize(quantize(values))
        assert np.max(np.abs(restored - values)) <= width * 1.001

    def test_outlier_is_clipped(self, rng):
        values = rng.standard_normal(1000).astype(np.float32)
        values[0] = 1e4
        mu, sigma = chunk_stats(values)
        chunk = quantize(values)
        assert chunk.indices[0] == NUM_BUCKETS - 1
        assert dequantize(chunk)[0] <= mu + CLIP_SIGMAS * sigma + 1e-3

    def test_stats_use_population_deviation(self):
        mu, sigma = chunk_stats(np.array([1.0, 3.0], dtype=np.float32))
        assert (mu, sigma) == (2.0, 1.0)

    def test_empty_rejected(self):
        with pytest.raises(StructuralError, match="empty"):
            quantize(np.zeros(0, dtype=np.float32))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            quantize(np.array([0.0, np.nan], dtype=np.float32))


class TestChunkCodec:
    """Wire layout of quantized chunks."""

    def setup_method(self):
        values = np.random.default_rng(9).standard_normal(300).astype(np.float32)
        self.chunk = quantize(values)
        self.buf = encode_chunk(self.chunk)

    def test_size_matches_layout(self):
        assert len(self.buf) == 4 + 4 * NUM_BUCKETS + 300
        assert self.chunk.nbytes == len(self.buf)

    def test_decode_restores_chunk(self):
        decoded = decode_chunk(self.buf)
        np.testing.assert_array_equal(decoded.codebook, self.chunk.codebook)
        np.testing.assert_array_equal(decoded.indices, self.chunk.indices)

    def test_compression_close_to_four(self):
        chunk = quantize(np.linspace(-1, 1, 1 << 16, dtype=np.float32))
        assert 4 * chunk.count / chunk.nbytes > 3.9

    def test_short_buffer(self):
        with pytest.raises(DecodeError, match="shorter than its header"):
            decode_chunk(self.buf[:100])

    def test_count_mismatch(self):
        with pytest.raises(DecodeError, match="declared count"):
            decode_chunk(self.buf + b"\x00")

    def test_non_finite_codebook(self):
        broken = bytearray(self.buf)
        struct.pack_into("<f", broken, 4, float("nan"))
        with pytest.raises(DecodeError, match="non-finite"):
            decode_chunk(bytes(broken))

    def test_decreasing_codebook(self):
        broken = bytearray(self.buf)
        struct.pack_into("<f", broken, 4 + 4 * 10, 1e6)
        with pytest.raises(DecodeError, match="nondecreasing"):
            decode_chunk(bytes(broken))

    def test_malformed_chunk_rejected(self):
        with pytest.raises(StructuralError, match="codebook"):
            QuantChunk(
                codebook=np.zeros(10, dtype=np.float32),
                indices=np.zeros(3, dtype=np.uint8),
            )
