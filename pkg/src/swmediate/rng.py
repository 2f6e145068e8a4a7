"""Counter-based random streams keyed by (seed, replicate, cluster)."""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox generator for a key path.

    The same (seed, keys) always yields the same stream, so replicates and
    clusters can be generated in any order or in parallel.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and stream keys must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))
