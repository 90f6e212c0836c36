# src/core/codec/quant.py

"""256-bucket codebook quantizer with 6-sigma clipping.

A chunk's mean ``mu`` and population standard deviation ``sigma`` define
the range ``[mu - 6 sigma, mu + 6 sigma]``, split into 256 equal buckets.
Values are clipped into range, bucketed (a value on an edge belongs to the
upper bucket, the top edge clamps to 255), and each bucket is represented
by the mean of its members. Empty buckets carry their midpoint.
"""

import math
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.core.errors import DecodeError, NumericError, StructuralError

NUM_BUCKETS = 256
CLIP_SIGMAS = 6.0
HEADER = struct.Struct("<I")
CODEBOOK_BYTES = 4 * NUM_BUCKETS


@dataclass(frozen=True)
class QuantChunk:
    """Wire form of a tensor chunk: fp32 codebook plus u8 indices."""

    codebook: np.ndarray
    indices: np.ndarray

    def __post_init__(self) -> None:
        if self.codebook.shape != (NUM_BUCKETS,):
            raise StructuralError(
                f"codebook must hold {NUM_BUCKETS} values, got {self.codebook.shape}"
            )
        if self.indices.dtype != np.uint8 or self.indices.ndim != 1:
            raise StructuralError("indices must be a flat uint8 array")

    @property
    def count(self) -> int:
        return int(self.indices.size)

    @property
    def nbytes(self) -> int:
        return HEADER.size + CODEBOOK_BYTES + self.count


def chunk_stats(values: np.ndarray) -> Tuple[float, float]:
    """Exact-sum mean and population standard deviation in float64."""
    wide = values.astype(np.float64)
    n = wide.size
    mu = math.fsum(wide) / n
    var = math.fsum((wide - mu) ** 2) / n
    return mu, math.sqrt(var)


def quantize(values: np.ndarray) -> QuantChunk:
    """Quantize a finite fp32 vector into a :class:`QuantChunk`.

    Raises:
        StructuralError: If ``values`` is empty.
        NumericError: If any element is NaN or infinite.
    """
    flat = np.asarray(values, dtype=np.float32).ravel()
    if flat.size == 0:
        raise StructuralError("cannot quantize an empty chunk")
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite value passed to quantize", name="chunk")

    mu, sigma = chunk_stats(flat)
    if sigma == 0.0 or flat.min() == flat.max():
        codebook = np.full(NUM_BUCKETS, flat[0], dtype=np.float32)
        indices = np.zeros(flat.size, dtype=np.uint8)
        return QuantChunk(codebook=codebook, indices=indices)

    lo = mu - CLIP_SIGMAS * sigma
    hi = mu + CLIP_SIGMAS * sigma
    width = (hi - lo) / NUM_BUCKETS
    clipped = np.clip(flat.astype(np.float64), lo, hi)
    buckets = np.floor((clipped - lo) / width)
    idx = np.clip(buckets, 0, NUM_BUCKETS - 1).astype(np.int64)

    sums = np.bincount(idx, weights=clipped, minlength=NUM_BUCKETS)
    counts = np.bincount(idx, minlength=NUM_BUCKETS)
    midpoints = lo + (np.arange(NUM_BUCKETS, dtype=np.float64) + 0.5) * width
    occupied = counts > 0
    means = np.where(occupied, sums / np.maximum(counts, 1), midpoints)
    # Rounding in the bucket arithmetic must not let adjacent slots cross.
    codebook = np.maximum.accumulate(means.astype(np.float32))
    return QuantChunk(codebook=codebook, indices=idx.astype(np.uint8))


def dequantize(chunk: QuantChunk) -> np.ndarray:
    """Expand a chunk back to fp32: ``out[i] = codebook[indices[i]]``."""
    if chunk.codebook.shape != (NUM_BUCKETS,):
        raise StructuralError("malformed codebook")
    return chunk.codebook.astype(np.float32, copy=False)[chunk.indices]


def encode_chunk(chunk: QuantChunk) -> bytes:
    """Layout: u32 LE count, 256 x fp32 LE codebook, count x u8 indices."""
    return b"".join(
        [
            HEADER.pack(chunk.count),
            np.ascontiguousarray(chunk.codebook, dtype="<f4").tobytes(),
            np.ascontiguousarray(chunk.indices, dtype=np.uint8).tobytes(),
        ]
    )


def decode_chunk(buf: bytes) -> QuantChunk:
    """Parse :func:`encode_chunk` output, rejecting anything malformed.

    Raises:
        DecodeError: On truncation, trailing bytes, a count that disagrees
            with the payload, or a codebook that is non-finite or decreasing.
    """
    if len(buf) < HEADER.size + CODEBOOK_BYTES:
        raise DecodeError(f"quant chunk of {len(buf)} bytes is shorter than its header")
    (count,) = HEADER.unpack_from(buf, 0)
    payload = len(buf) - HEADER.size - CODEBOOK_BYTES
    if payload != count:
        raise DecodeError(f"declared count {count} but payload holds {payload} indices")
    codebook = np.frombuffer(buf, dtype="<f4", count=NUM_BUCKETS, offset=HEADER.size)
    if not np.all(np.isfinite(codebook)):
        raise DecodeError("codebook contains non-finite values")
    if np.any(np.diff(codebook) < 0):
        raise DecodeError("codebook is not nondecreasing")
    indices = np.frombuffer(
        buf, dtype=np.uint8, count=count, offset=HEADER.size + CODEBOOK_BYTES
    )
    return QuantChunk(codebook=codebook.astype(np.float32), indices=indices.copy())
