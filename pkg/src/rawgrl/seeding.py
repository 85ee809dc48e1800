"""Counter-based seed derivation so independent streams never depend on call order."""

from __future__ import annotations

import numpy as np

# stream tags
REALIZATION = 1
SIMULATION = 2
POLICY = 3
EXPLORE = 4
CUT = 5
INIT = 6
HELDOUT = 7
MOBILITY = 8


def derive(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *(int(k) for k in keys)])


def rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *keys))
