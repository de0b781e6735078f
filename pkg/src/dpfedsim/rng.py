"""Named, counter-based random substreams.

Every consumer of randomness asks for a generator keyed by
``(master_seed, purpose, *keys)``.  Streams are built on Philox (a
counter-based bit generator) seeded through ``SeedSequence``, so changing
one axis of randomness (say the exploration stream) never perturbs
another (say the aggregation noise).
"""
from __future__ import annotations

import zlib

import numpy as np

PURPOSES = (
    "init",
    "split",
    "partition",
    "select",
    "client",
    "noise",
    "explore",
    "episode",
    "data",
)


def purpose_id(purpose: str) -> int:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown rng purpose {purpose!r}")
    return zlib.crc32(purpose.encode("ascii"))


def stream(master_seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``(master_seed, purpose, *keys)``."""
    if master_seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    entropy = [int(master_seed), purpose_id(purpose), *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
