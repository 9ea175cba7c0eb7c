"""Named, reproducible random streams backed by the Philox counter generator.

Every piece of randomness in the library draws from one of the streams below,
derived from a single user-facing seed. Adding a new consumer of randomness
means adding a new stream name, never reusing an existing one, so that
existing runs stay reproducible.
"""
from __future__ import annotations

import numpy as np

# Stream ids are part of the reproducibility contract; never renumber.
STREAMS = {
    "data-shuffle": 0,
    "init": 1,
    "sampler": 2,
    "output-iterate": 3,
    "planted": 4,
}


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the named Philox stream for a run seed."""
    if name not in STREAMS:
        raise ValueError(f"unknown rng stream {name!r}; known streams: {sorted(STREAMS)}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],))
    return np.random.Generator(np.random.Philox(ss))
