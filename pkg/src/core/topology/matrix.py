# src/core/topology/matrix.py

"""Pairwise bandwidth table.

Measurements are directional; the matrix keeps the smaller of the two
directions so every ring edge is scored by its slower side. Tables load from
and save to a whitespace-separated text form.
"""

import io
import logging
from typing import List, Mapping, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
import pandas as pd

from src.core.errors import DecodeError, StructuralError

logger = logging.getLogger(__name__)

EMA_ALPHA = 0.5


def ema(previous: Optional[float], measured: float, alpha: float = EMA_ALPHA) -> float:
    """Exponential moving average; the first measurement is taken as-is."""
    if previous is None:
        return float(measured)
    return float(alpha * measured + (1.0 - alpha) * previous)


class BandwidthMatrix:
    """Symmetric n x n link bandwidths in bits/second.

    Measurements may be asymmetric; on ingest each pair keeps the smaller of
    its two directions. The diagonal is unused and stored as zero.

    Args:
        values: Square array of nonnegative finite bandwidths.
        node_ids: Labels for rows/columns; defaults to ``"0".."n-1"``.
    """

    def __init__(
        self, values: npt.ArrayLike, node_ids: Optional[Sequence[str]] = None
    ):
        array = np.array(values, dtype=np.float64)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise StructuralError(
                f"bandwidth matrix must be square, got shape {array.shape}"
            )
        n = array.shape[0]
        if n < 2:
            raise StructuralError(f"bandwidth matrix needs at least 2 nodes, got {n}")
        off_diagonal = array[~np.eye(n, dtype=bool)]
        if not np.all(np.isfinite(off_diagonal)) or np.any(off_diagonal < 0):
            raise StructuralError("bandwidths must be finite and nonnegative")
        if node_ids is None:
            node_ids = [str(i) for i in range(n)]
        labels = [str(x) for x in node_ids]
        if len(labels) != n or len(set(labels)) != n:
            raise StructuralError(f"need {n} distinct node ids, got {labels}")
        symmetric = np.minimum(array, array.T)
        np.fill_diagonal(symmetric, 0.0)
        self._values = symmetric
        self._values.setflags(write=False)
        self.node_ids: List[str] = labels

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def values(self) -> np.ndarray:
        return self._values

    def weight(self, i: int, j: int) -> float:
        return float(self._values[i, j])

    def between(self, a: str, b: str) -> float:
        return self.weight(self.node_ids.index(a), self.node_ids.index(b))

    def ema_update(
        self, measured: "BandwidthMatrix", alpha: float = EMA_ALPHA
    ) -> "BandwidthMatrix":
        """Blend a fresh measurement into this matrix (same node ids required)."""
        if measured.node_ids != self.node_ids:
            raise StructuralError("EMA update needs matrices over the same node ids")
        blended = alpha * measured.values + (1.0 - alpha) * self._values
        return BandwidthMatrix(blended, self.node_ids)

    def relabeled(self, perm: Sequence[int]) -> "BandwidthMatrix":
        """Matrix with node ``perm[i]`` moved to position ``i``."""
        idx = np.asarray(perm, dtype=np.intp)
        labels = [self.node_ids[i] for i in idx]
        return BandwidthMatrix(self._values[np.ix_(idx, idx)], labels)

    @classmethod
    def from_rows(
        cls,
        node_ids: Sequence[str],
        rows: Mapping[str, Mapping[str, float]],
        floor_bps: float,
    ) -> "BandwidthMatrix":
        """Build from per-source measurement rows; missing edges get ``floor_bps``."""
        n = len(node_ids)
        values = np.full((n, n), float(floor_bps))
        for i, src in enumerate(node_ids):
            row = rows.get(src, {})
            for j, dst in enumerate(node_ids):
                if i != j and dst in row:
                    values[i, j] = row[dst]
        # One-sided measurements stand in for the missing direction.
        for i, src in enumerate(node_ids):
            for j, dst in enumerate(node_ids):
                if i != j and dst not in rows.get(src, {}) and src in rows.get(dst, {}):
                    values[i, j] = values[j, i]
        return cls(values, node_ids)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self._values, index=self.node_ids, columns=self.node_ids)
        frame.index.name = "node"
        return frame

    def to_text(self) -> str:
        """Whitespace-separated table: header of node ids, one row per node."""
        return self.to_frame().to_csv(sep="\t", float_format="%.9g")

    @classmethod
    def from_text(cls, text: str) -> "BandwidthMatrix":
        """Parse :meth:`to_text` output; ``#`` starts a comment line."""
        try:
            frame = pd.read_csv(io.StringIO(text), sep=r"\s+", index_col=0, comment="#")
        except (ValueError, pd.errors.ParserError) as exc:
            raise DecodeError(f"cannot parse bandwidth table: {exc}") from exc
        columns = [str(c) for c in frame.columns]
        rows = [str(r) for r in frame.index]
        if columns != rows:
            raise DecodeError(f"row labels {rows} do not match header {columns}")
        try:
            values = frame.to_numpy(dtype=np.float64)
        except ValueError as exc:
            raise DecodeError(f"non-numeric bandwidth entry: {exc}") from exc
        return cls(values, columns)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BandwidthMatrix):
            return NotImplemented
        same_ids = self.node_ids == other.node_ids
        return same_ids and np.array_equal(self._values, other._values)

    def __repr__(self) -> str:
        return f"BandwidthMatrix(n={self.n}, node_ids={self.node_ids})"


def as_matrix(matrix: Union[BandwidthMatrix, npt.ArrayLike]) -> BandwidthMatrix:
    return matrix if isinstance(matrix, BandwidthMatrix) else BandwidthMatrix(matrix)

