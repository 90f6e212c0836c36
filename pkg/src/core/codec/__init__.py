"""Quantization codec for pseudo-gradient transmission."""

from .quant import (
    CLIP_SIGMAS,
    NUM_BUCKETS,
    QuantChunk,
    chunk_stats,
    decode_chunk,
    dequantize,
    encode_chunk,
    quantize,
)

__all__ = [
    "CLIP_SIGMAS",
    "NUM_BUCKETS",
    "QuantChunk",
    "chunk_stats",
    "decode_chunk",
    "dequantize",
    "encode_chunk",
    "quantize",
]
