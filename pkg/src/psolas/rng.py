"""Seeded random streams.

Every trial draws from its own Philox (counter-based) generator whose key is
derived from ``SeedSequence(master_seed, spawn_key=(trial_index,))``. Trial k
can therefore be replayed in isolation, and the streams do not depend on how
many trials run or in which order.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def trial_seed_sequence(master_seed: int, trial_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(trial_index),))


def trial_rng(master_seed: int, trial_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(trial_seed_sequence(master_seed, trial_index)))


def trial_seed_label(master_seed: int, trial_index: int) -> str:
    """Human-readable handle stored in manifests: ``<master>/<index>``."""
    return f"{int(master_seed)}/{int(trial_index)}"
