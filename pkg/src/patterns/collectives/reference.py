# src/patterns/collectives/reference.py

"""Slow, loop-based oracles for the ring collective and its codec.

These reproduce the hop-by-hop arithmetic of :mod:`ring` without any
networking: the same chunk layout, the same summation order, the same
per-segment quantization. Tests compare the networked result against them.
"""

import math
from typing import List, Sequence, Tuple, Union

import numpy as np

from src.core.codec import CLIP_SIGMAS, NUM_BUCKETS
from src.patterns.collectives.pipeline import ReduceMode, segment_bounds


def scalar_quantize(values: Sequence[float]) -> Tuple[List[np.float32], List[int]]:
    """Element-by-element codebook quantizer; returns ``(codebook, indices)``."""
    xs = [float(np.float32(v)) for v in values]
    n = len(xs)
    mu = math.fsum(xs) / n
    sigma = math.sqrt(math.fsum((x - mu) ** 2 for x in xs) / n)
    if sigma == 0.0 or min(xs) == max(xs):
        return [np.float32(xs[0])] * NUM_BUCKETS, [0] * n

    lo = mu - CLIP_SIGMAS * sigma
    hi = mu + CLIP_SIGMAS * sigma
    width = (hi - lo) / NUM_BUCKETS
    sums = [0.0] * NUM_BUCKETS
    counts = [0] * NUM_BUCKETS
    indices = []
    for x in xs:
        clipped = min(max(x, lo), hi)
        bucket = min(max(math.floor((clipped - lo) / width), 0), NUM_BUCKETS - 1)
        sums[bucket] += clipped
        counts[bucket] += 1
        indices.append(bucket)

    codebook: List[np.float32] = []
    running = np.float32(-np.inf)
    for b in range(NUM_BUCKETS):
        if counts[b]:
            value = np.float32(sums[b] / counts[b])
        else:
            value = np.float32(lo + (b + 0.5) * width)
        running = max(running, value)
        codebook.append(running)
    return codebook, indices


def scalar_dequantize(
    codebook: Sequence[np.float32], indices: Sequence[int]
) -> np.ndarray:
    return np.array([codebook[i] for i in indices], dtype=np.float32)


def _transmit(values: np.ndarray, mode: ReduceMode, segment_elems: int) -> np.ndarray:
    if mode == ReduceMode.FP32:
        return values.astype(np.float32)
    out = np.empty(values.size, dtype=np.float32)
    for lo, hi in segment_bounds(values.size, segment_elems):
        codebook, indices = scalar_quantize(values[lo:hi])
        out[lo:hi] = scalar_dequantize(codebook, indices)
    return out


def reference_ring_mean(
    inputs: Sequence[np.ndarray],
    mode: Union[str, ReduceMode] = ReduceMode.FP32,
    segment_elems: int = 1 << 18,
) -> np.ndarray:
    """The mean a ring of ``len(inputs)`` participants computes, in ring order."""
    mode = ReduceMode.parse(mode)
    k = len(inputs)
    flats = [np.asarray(x, dtype=np.float32).ravel() for x in inputs]
    if k == 1:
        return flats[0].copy()
    numel = flats[0].size
    result = np.empty(numel, dtype=np.float32)
    for chunk in range(k):
        lo, hi = chunk * numel // k, (chunk + 1) * numel // k
        partial = flats[chunk][lo:hi]
        for hop in range(1, k):
            received = _transmit(partial, mode, segment_elems)
            partial = received + flats[(chunk + hop) % k][lo:hi]
        mean = (partial / np.float32(k)).astype(np.float32)
        result[lo:hi] = _transmit(mean, mode, segment_elems)
    return result


def oracle_mean(inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Float64 mean of the inputs, for error measurements."""
    stacked = np.stack([np.asarray(x, dtype=np.float64).ravel() for x in inputs])
    return stacked.mean(axis=0)
