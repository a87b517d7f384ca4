"""Seeded random streams.

Every random draw in the package (graphs, features, labels, weights,
permutations) goes through :func:`make_rng`, which wraps numpy's Philox4x64-10
counter-based bit generator. Philox output for a given key is stable across
platforms and numpy releases, so a seed fully determines an experiment.
"""

import numpy as np

PRNG_NAME = "Philox4x64-10"


def make_rng(seed: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(key=int(seed)))
