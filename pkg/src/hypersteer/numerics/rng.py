"""Counter-based deterministic random streams.

A draw is a pure function of (seed, stream, counter): the stream keys a
Philox generator and the counter indexes 64-bit words of its output, so any
trajectory is replayable from its header alone. The counter advances by
exactly the number of values drawn.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

from .autodiff import Tensor

_MASK64 = (1 << 64) - 1
_MIX = 0x9E3779B97F4A7C15  # splitmix64 increment, used to derive child streams


class RngStream:
    """Deterministic stream of draws indexed by a 64-bit counter."""

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def child(self, index: int) -> "RngStream":
        """Independent stream derived deterministically from this one."""
        sub = (self.stream * _MIX + index + 1) & _MASK64
        return RngStream(self.seed, stream=sub)

    def _raw(self, n: int) -> np.ndarray:
        # Philox yields 4 uint64 words per counter block; position the block
        # counter at the word index and slice, so draws map 1:1 to counters.
        block, offset = divmod(self.counter, 4)
        nblocks = (offset + n + 3) // 4
        gen = Philox(key=self.seed | (self.stream << 64), counter=block)
        words = gen.random_raw(nblocks * 4)
        self.counter += n
        return words[offset : offset + n]

    def uniform(self, shape) -> np.ndarray:
        """I.i.d. uniforms on (0, 1), one counter tick per value."""
        shape = _check_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        u = ((self._raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(shape)

    def gaussian(self, shape) -> Tensor:
        """I.i.d. standard normals via the inverse normal CDF."""
        return Tensor(ndtri(self.uniform(shape)))

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """Uniform integers in [low, high), one counter tick per value."""
        if high <= low:
            raise ValueError(f"integers: empty range [{low}, {high})")
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if any(s <= 0 for s in shape):
        raise ValueError(f"draw shape must be nonempty, got {shape}")
    return shape
