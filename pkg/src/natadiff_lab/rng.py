"""Seeded counter-based generators. No module-level RNG state anywhere in the package."""

import numpy as np


def make_rng(seed, *stream) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional stream path.

    Distinct ``stream`` tuples give statistically independent generators, so a
    batch of runs can derive one generator per run from a single seed.
    """
    entropy = [int(seed)] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
