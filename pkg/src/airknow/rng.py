"""Deterministic random state handling.

Every stochastic operation in the package takes an explicit :class:`RngState`.
The state is a (seed, stream) pair feeding a counter-based Philox generator,
so identical states give identical draw sequences on every platform and
independent streams can be derived cheaply for parallel or nested work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Fixed stream offsets so each module draws from its own lane of a run seed.
STREAM_WORLD = 1
STREAM_NOISE = 2
STREAM_ARBITER = 3
STREAM_ANCHOR = 4
STREAM_EKI = 5
STREAM_DSR = 6
STREAM_EVAL = 7


def _mix(state: int, key: int) -> int:
    """splitmix64 finalizer over state xor golden-scrambled key."""
    x = (state ^ ((key * _GOLDEN) & _MASK64)) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


@dataclass(frozen=True)
class RngState:
    """Immutable (seed, stream) pair identifying one deterministic draw sequence."""

    seed: int
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream", int(self.stream) & _MASK64)

    def generator(self) -> np.random.Generator:
        """Fresh generator at the start of this state's sequence."""
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, *keys: int) -> "RngState":
        """New state whose stream mixes in the given keys, in order."""
        stream = self.stream
        for key in keys:
            stream = _mix(stream, int(key) & _MASK64)
        return RngState(self.seed, stream)
