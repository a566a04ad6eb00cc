"""Counter-based, keyed random streams.

Every uniform consumed by the particle engine is addressed by
``(seed, replicate, time, role)`` plus its position ``i`` in the stream, which
is the particle index.  Streams are Philox generators keyed through a
``SeedSequence``; drawing ``N`` values returns the first ``N`` entries of the
stream, so the draw seen by particle ``i`` never depends on ``N``, on how many
other streams were opened, or on the order in which replicates are scheduled.

Two runs that share a seed therefore consume bit-identical randomness at
identical keys, which is what lets an adaptive run and a reference run be
coupled exactly until their resampling schedules diverge.
"""
from enum import IntEnum

import numpy as np

_TWO_M52 = 2.0 ** -52


class Role(IntEnum):
    INIT = 0
    MUTATION = 1
    KEEP = 2
    SELECTION = 3
    THRESHOLD = 4


def stream(seed, replicate, time, role):
    """Return a fresh generator for one key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replicate), int(time), int(role)))
    return np.random.Generator(np.random.Philox(ss))


class KeyedRNG:
    """Addressable uniform draws for one ``(seed, replicate)`` pair."""

    def __init__(self, seed, replicate=0):
        if int(seed) < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.replicate = int(replicate)

    def uniforms(self, time, role, size):
        """Uniforms on ``[0, 1)``; entry ``i`` belongs to particle ``i``."""
        return stream(self.seed, self.replicate, time, role).random(size)

    def open_uniforms(self, time, role, size):
        """Uniforms strictly inside ``(0, 1)``, on the 2**-52 midpoint lattice."""
        k = stream(self.seed, self.replicate, time, role).integers(0, 2 ** 52, size=size)
        return (k.astype(np.float64) + 0.5) * _TWO_M52

    def __repr__(self):
        return f"KeyedRNG(seed={self.seed}, replicate={self.replicate})"
