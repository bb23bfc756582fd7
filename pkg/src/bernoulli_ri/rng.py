"""Reproducible random streams.

Every Monte Carlo routine in the package draws from an :class:`RngStream`.
A stream is keyed by ``(seed, stream_id)`` and backed by numpy's Philox
generator, a counter-based bit generator, so that independent streams can be
derived without coordination: replicate ``r`` of a simulation, or chunk ``c``
of a long Monte Carlo loop, gets its own keyed substream and the result does
not depend on which worker processed it or in which order.
"""

from __future__ import annotations

import numpy as np


class RngStream:
    """A seeded Philox stream identified by ``(seed, stream_id, path)``.

    ``path`` holds the keys of nested substreams; two streams with equal
    ``(seed, stream_id, path)`` produce bit-identical sequences.
    """

    def __init__(self, seed: int, stream_id: int = 0, path: tuple[int, ...] = ()):
        seed = int(seed)
        stream_id = int(stream_id)
        if seed < 0 or stream_id < 0 or any(int(k) < 0 for k in path):
            raise ValueError("seed, stream_id and substream keys must be non-negative")
        self.seed = seed
        self.stream_id = stream_id
        self.path = tuple(int(k) for k in path)
        seq = np.random.SeedSequence(seed, spawn_key=(stream_id, *self.path))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def substream(self, *key: int) -> RngStream:
        """Child stream; independent of how much of this stream was consumed."""
        return RngStream(self.seed, self.stream_id, self.path + tuple(key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"


def as_rng(rng: RngStream | int | None) -> RngStream:
    """Coerce an int seed (or ``None`` for fresh OS entropy) into a stream."""
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(int(np.random.SeedSequence().generate_state(1, np.uint64)[0]))
    return RngStream(int(rng))
