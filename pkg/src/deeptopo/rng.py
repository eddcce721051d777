"""Pinned, counter-based random streams.

Every stochastic decision draws from a Philox generator keyed by an integer
derived from the run seed and the indices that identify the draw (sample id,
epoch, ...), so results never depend on generation order.
"""
from __future__ import annotations

import numpy as np


def derive_seed(*parts: int) -> int:
    """Deterministically mix non-negative integers into one 64-bit seed."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32)
    return (int(state[0]) << 32) | int(state[1])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))
