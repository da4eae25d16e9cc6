"""Named, seeded random streams.

Every consumer of randomness (parameter init, sentence masking, bootstrap
resampling, LSH rotations, dropout) draws from its own stream, identified by
a ``(seed, stream_id)`` pair plus optional integer sub-keys.  Streams are
built from ``SeedSequence``/``PCG64`` so draws are identical across runs and
platforms.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: str
    subkeys: tuple = field(default=())

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & (2**64 - 1),
            spawn_key=(_label_key(self.stream_id),) + tuple(int(k) for k in self.subkeys),
        )
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, *keys: int) -> "RngStream":
        """Child stream; ``derive(i)`` differs from ``derive(j)`` for ``i != j``."""
        return RngStream(self.seed, self.stream_id, self.subkeys + tuple(int(k) for k in keys))


def rng(seed: int, stream_id: str, *keys: int) -> np.random.Generator:
    return RngStream(seed, stream_id, tuple(keys)).generator()
