"""Deterministic random substreams.

Every independent unit of work (a scan row, an estimation sample, a
bootstrap run) draws from its own Philox counter-based generator whose key
comes from ``SeedSequence(entropy=seed, spawn_key=(stream, index))``.  A
unit's output therefore depends only on (seed, stream, index), never on
execution order or thread count.
"""
from __future__ import annotations

import numpy as np

ALGORITHM = "numpy Philox4x64-10 keyed by SeedSequence(entropy=seed, spawn_key=(stream, index))"

# stream ids
PULSES = 1
SCAN = 2
SAMPLES = 3
BOOTSTRAP = 4

MAX_SEED = 2**64 - 1


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def substream(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=check_seed(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(ss))
