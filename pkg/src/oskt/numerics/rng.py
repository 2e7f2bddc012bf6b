"""Deterministic random streams keyed by (seed, stream id).

Every stochastic component draws from its own counter-based stream, so
reproducibility does not depend on call order: the teacher init, the
clustering, the batch sampler and the dataset generator can each be
re-run in isolation and produce the same values.

Streams are backed by numpy's Philox bit generator, which is itself a
counter-based generator: the (seed, stream) pair becomes the 128-bit
Philox key, and the draw position is the counter.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError

_MASK64 = (1 << 64) - 1

# Conventional stream ids.  Keeping them in one place avoids accidental
# collisions between subsystems that share a user-facing seed.
STREAM_TEACHER_INIT = 1
STREAM_CLUSTER = 2
STREAM_REFINE = 3
STREAM_DATASET = 4
STREAM_SAMPLER = 5
STREAM_FINETUNE = 6
STREAM_HEAD_INIT = 7


class RngStream:
    """One independent random stream.

    (seed, stream) fully determines the sequence; two streams with
    different ids never overlap in practice.  ``sub(k)`` derives a child
    stream deterministically, which is how per-layer / per-epoch streams
    are minted from a single experiment seed.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not isinstance(seed, (int, np.integer)):
            raise ContractError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def sub(self, k: int) -> "RngStream":
        """Derive child stream ``k`` of this stream."""
        # Mix the child index into the stream id with a splitmix-style odd
        # constant so (stream, k) pairs land far apart.
        mixed = (self.stream * 0x9E3779B97F4A7C15 + int(k) + 1) & _MASK64
        return RngStream(self.seed, mixed)

    # -- draws -------------------------------------------------------------

    def random(self, shape=None) -> np.ndarray | float:
        return self._gen.random(shape)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray | float:
        return self._gen.normal(0.0, scale, shape)

    def integers(self, low: int, high: int | None = None, shape=None) -> np.ndarray | int:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"RngStream(seed={self.seed}, stream={self.stream})"
