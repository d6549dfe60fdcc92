"""Counter-based random streams.

Every draw is addressed by (seed, purpose, step, block) through the Philox
counter, so the values a replica receives never depend on scheduling. Replicas
are grouped in fixed blocks of ``BLOCK`` and a block's draws are laid out in
replica-major, site-minor order.
"""
from __future__ import annotations

import numpy as np

BLOCK = 16

ENVIRONMENT = 1
INITIAL = 2
NOISE = 3
AUXILIARY = 4

_MASK = (1 << 64) - 1


def stream(seed: int, purpose: int, step: int = 0, block: int = 0) -> np.random.Generator:
    seed = int(seed)
    key = np.array([seed & _MASK, (seed >> 64) & _MASK], dtype=np.uint64)
    counter = np.array([0, step, block, purpose], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def blocks_for(replicas) -> list[int]:
    """Block indices touched by an iterable of replica ids, sorted."""
    return sorted({int(r) // BLOCK for r in replicas})
