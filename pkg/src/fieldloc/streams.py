"""Keyed random streams.

Every random draw in a run is taken from a stream derived from the scenario
seed plus structural keys (time index, purpose tag, particle index).  Results
therefore never depend on scheduling or thread count.
"""

from __future__ import annotations

import numpy as np

# Purpose tags; part of the determinism contract, do not renumber.
PREDICT = 1
PIXELS = 2
RENDER = 3
RESAMPLE = 4
INIT = 5
TRIAL = 6
ODOMETRY = 7
IMAGE = 8


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *keys)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def derive_base(seed: int, *keys: int) -> int:
    """Stable 63-bit integer derived from (seed, *keys), for re-keying substreams."""
    return int(substream(seed, *keys).integers(0, 2**63))
