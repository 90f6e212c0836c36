# src/core/numerics/rng.py

"""Counter-based random streams.

Every draw is keyed by ``(seed, stream)`` and positioned by an integer
counter, using numpy's Philox bit generator. The same triple produces the
same bits on any platform, and any position can be regenerated without
replaying earlier draws, which is what checkpoint resume needs.
"""

from dataclasses import dataclass, replace

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    """A position in a keyed random stream.

    Attributes:
        seed: 64-bit run seed.
        counter: Block index; one block per logical draw (e.g. one batch).
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= _MASK64:
            raise ValueError(f"seed {self.seed} does not fit in 64 bits")
        if self.counter < 0:
            raise ValueError(f"counter must be non-negative, got {self.counter}")

    def generator(self, stream: int = 0) -> np.random.Generator:
        """Return a generator positioned at this block of ``stream``.

        The block index occupies the top 64-bit word of Philox's 256-bit
        counter, so draws inside one block never reach the next block.
        """
        key = np.array([self.seed & _MASK64, stream & _MASK64], dtype=np.uint64)
        counter = np.array([0, 0, 0, self.counter & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def at(self, counter: int) -> "RngState":
        return replace(self, counter=counter)

    def advance(self, n: int = 1) -> "RngState":
        return replace(self, counter=self.counter + n)
