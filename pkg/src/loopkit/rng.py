"""Seeded random streams.

All randomness in the library flows through Philox, a counter-based generator
whose output for a given (seed, stream) key is fixed by the algorithm rather
than by platform details.  Independent substreams come from distinct stream
ids, so per-item generation can be parallelized or regenerated in isolation.
"""

import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for the (seed, stream) pair; identical keys give identical output."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
