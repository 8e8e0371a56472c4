"""Deterministic random-stream splitting.

Every randomized component gets its own generator derived from a master seed
and a structured key, so independent runs are reproducible and algorithms
sharing a key (e.g. per-node example sampling) draw identical sequences.
"""

from __future__ import annotations

import numpy as np

# Stable purpose codes; new purposes must be appended, never renumbered.
_PURPOSES = {
    "sample": 0,
    "compress": 1,
    "compress_shift": 2,
    "coin": 3,
    "data": 4,
    "verify": 5,
}


def split_rng(master_seed: int, purpose: str, node: int = 0) -> np.random.Generator:
    """Return the generator for one (purpose, node) pair under a master seed."""
    try:
        code = _PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown rng purpose {purpose!r}") from None
    seq = np.random.SeedSequence(master_seed, spawn_key=(code, node))
    return np.random.default_rng(seq)


def node_streams(master_seed: int, purpose: str, n: int) -> list[np.random.Generator]:
    """One independent stream per node for the given purpose."""
    return [split_rng(master_seed, purpose, tau) for tau in range(n)]
