"""Deterministic RNG stream derivation.

One root seed governs a run. Independent streams (per episode, per batch)
are derived by mixing an integer key path into a ``numpy`` ``SeedSequence``:
``SeedSequence(entropy=(root_seed, *key))``. The derivation depends only on
the key, never on generation order, so parallel workers produce identical
output to a sequential run.
"""

from __future__ import annotations

import numpy as np


def derive_seed_sequence(root_seed: int, *key: int) -> np.random.SeedSequence:
    """Seed sequence for the stream identified by ``key`` under ``root_seed``."""
    return np.random.SeedSequence(entropy=(int(root_seed), *[int(k) for k in key]))


def derive_rng(root_seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``key`` under ``root_seed``."""
    return np.random.default_rng(derive_seed_sequence(root_seed, *key))


def derive_seed(root_seed: int, *key: int) -> int:
    """64-bit integer seed for the stream, suitable for recording in datasets."""
    state = derive_seed_sequence(root_seed, *key).generate_state(1, dtype=np.uint64)
    return int(state[0])
