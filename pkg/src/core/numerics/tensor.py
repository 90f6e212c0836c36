# src/core/numerics/tensor.py

"""Tensors, ordered parameter sets and their canonical serialization."""

import hashlib
import math
import struct
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from src.core.errors import DecodeError, NumericError, StructuralError

_U32 = struct.Struct("<I")
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Coerce ``values`` into a finite, C-contiguous fp32 array.

    Args:
        values: Anything ``numpy.asarray`` accepts.
        name: Used in error messages.

    Returns:
        A float32 array that owns a contiguous buffer.

    Raises:
        NumericError: If any element is NaN or infinite.
    """
    arr = np.ascontiguousarray(values, dtype=np.float32)
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in '{name}'", name=name)


def encode_tensor(name: str, arr: np.ndarray) -> bytes:
    """Serialize one named tensor.

    Layout: u32 name length, UTF-8 name, u32 rank, rank x u32 extents, then
    the row-major data as little-endian fp32.
    """
    raw_name = name.encode("utf-8")
    shape = tuple(int(d) for d in arr.shape)
    parts = [
        _U32.pack(len(raw_name)),
        raw_name,
        _U32.pack(len(shape)),
        struct.pack(f"<{len(shape)}I", *shape),
        np.ascontiguousarray(arr, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[str, np.ndarray, int]:
    """Inverse of :func:`encode_tensor`.

    Returns:
        ``(name, array, next_offset)``.

    Raises:
        DecodeError: If the buffer is truncated or the name is not UTF-8.
    """
    view = memoryview(buf)
    try:
        (name_len,) = _U32.unpack_from(view, offset)
        offset += 4
        if offset + name_len > len(view):
            raise DecodeError("tensor name runs past end of buffer")
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (rank,) = _U32.unpack_from(view, offset)
        offset += 4
        if rank > 32:
            raise DecodeError(f"implausible rank {rank} for tensor '{name}'")
        shape = struct.unpack_from(f"<{rank}I", view, offset)
        offset += 4 * rank
    except struct.error as exc:
        raise DecodeError(f"truncated tensor header: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DecodeError(f"tensor name is not UTF-8: {exc}") from exc
    count = math.prod(shape)
    nbytes = 4 * count
    if offset + nbytes > len(view):
        raise DecodeError(f"tensor '{name}' data truncated")
    data = np.frombuffer(view, dtype="<f4", count=count, offset=offset)
    arr = data.astype(np.float32).reshape(shape)
    return name, arr, offset + nbytes


class ModelParams:
    """An ordered set of named tensors.

    The insertion order is the canonical order: it drives serialization,
    flattening and hashing, and must be identical on every node. Arrays are
    fp32 for training; float64 instances are allowed for numerical checks.
    """

    def __init__(self, entries: Iterable[Tuple[str, np.ndarray]]):
        self._entries: Dict[str, np.ndarray] = {}
        for name, values in entries:
            if name in self._entries:
                raise StructuralError(f"duplicate parameter name '{name}'")
            arr = np.asarray(values)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(np.float32)
            if any(d <= 0 for d in arr.shape):
                raise StructuralError(
                    f"parameter '{name}' has a non-positive extent {arr.shape}"
                )
            self._entries[name] = np.ascontiguousarray(arr)

    # Mapping-style access -------------------------------------------------

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self) -> List[Tuple[str, np.ndarray]]:
        return list(self._entries.items())

    def shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, tuple(arr.shape)) for name, arr in self._entries.items()]

    @property
    def numel(self) -> int:
        return sum(int(arr.size) for arr in self._entries.values())

    @property
    def dtype(self) -> np.dtype:
        first = next(iter(self._entries.values()), None)
        return first.dtype if first is not None else np.dtype(np.float32)

    # Construction helpers --------------------------------------------------

    def copy(self) -> "ModelParams":
        return ModelParams((name, arr.copy()) for name, arr in self._entries.items())

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams((name, fn(name, arr)) for name, arr in self._entries.items())

    def zeros_like(self) -> "ModelParams":
        return self.map(lambda _, arr: np.zeros_like(arr))

    def astype(self, dtype) -> "ModelParams":
        return self.map(lambda _, arr: arr.astype(dtype))

    def check_same_structure(self, other: "ModelParams", what: str) -> None:
        """Raise :class:`StructuralError` unless ``other`` has our names and shapes."""
        if self.shapes() != other.shapes():
            raise StructuralError(
                f"{what}: shapes {other.shapes()} do not match {self.shapes()}"
            )

    def check_finite(self, what: str) -> None:
        for name, arr in self._entries.items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{what}: non-finite values in '{name}'", name=name)

    # Flat views ------------------------------------------------------------

    def flatten(self) -> np.ndarray:
        """Concatenate all tensors, in canonical order, into one fp32 vector."""
        if not self._entries:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate(
            [
                arr.astype(np.float32, copy=False).ravel()
                for arr in self._entries.values()
            ]
        )

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        """Build a ModelParams shaped like ``self`` from a flat vector."""
        flat = np.asarray(flat)
        if flat.ndim != 1 or flat.size != self.numel:
            raise StructuralError(
                f"flat vector of size {flat.size} cannot fill {self.numel} elements"
            )
        entries = []
        offset = 0
        for name, arr in self._entries.items():
            entries.append(
                (name, flat[offset:offset + arr.size].reshape(arr.shape).copy())
            )
            offset += arr.size
        return ModelParams(entries)

    # Identity --------------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Canonical encoding: u32 entry count followed by each tensor."""
        return _U32.pack(len(self._entries)) + b"".join(
            encode_tensor(name, arr) for name, arr in self._entries.items()
        )

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> Tuple["ModelParams", int]:
        try:
            (count,) = _U32.unpack_from(buf, offset)
        except struct.error as exc:
            raise DecodeError(f"truncated parameter block: {exc}") from exc
        offset += 4
        entries = []
        for _ in range(count):
            name, arr, offset = decode_tensor(buf, offset)
            entries.append((name, arr))
        try:
            return cls(entries), offset
        except StructuralError as exc:
            raise DecodeError(str(exc)) from exc

    def digest(self) -> str:
        """Hex sha256 of the canonical encoding."""
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def bit_equal(self, other: "ModelParams") -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(
            self[name].dtype == other[name].dtype
            and self[name].tobytes() == other[name].tobytes()
            for name in self._entries
        )

    def __repr__(self) -> str:
        return f"ModelParams({self.shapes()})"


def params_from_dict(
    values: Dict[str, np.ndarray], order: Optional[List[str]] = None
) -> ModelParams:
    """Build ModelParams from a dict, optionally forcing an explicit order."""
    names = order if order is not None else list(values)
    return ModelParams((name, values[name]) for name in names)
