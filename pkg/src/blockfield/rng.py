"""Counter-based random-stream derivation.

Every random draw in the pipeline comes from a generator keyed by
(seed, stream tag, counter), so results never depend on scheduling or
on how work is chunked across processes.
"""

from __future__ import annotations

import numpy as np

# Stream tags; arbitrary but fixed.
STREAM_BATCH = 1
STREAM_SAMPLES = 2
STREAM_OCCUPANCY = 3
STREAM_RENDER = 4
STREAM_INIT = 5
STREAM_BLOCK = 6


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, *key); same inputs, same stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def derived_seed(seed: int, *key: int) -> int:
    """Stable derived integer seed (e.g. per-block training seeds)."""
    return int(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)).generate_state(1)[0])
