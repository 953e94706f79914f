"""Per-path random streams derived from a master seed.

Every path owns an independent PCG64 stream seeded by a 64-bit integer, so a
single path can be regenerated from its seed alone and results do not depend
on how paths are batched.
"""

from __future__ import annotations

import numpy as np


def path_seeds(master_seed: int, n_paths: int) -> np.ndarray:
    """Return ``n_paths`` uint64 seeds spawned from ``master_seed``."""
    if n_paths < 0:
        raise ValueError("n_paths must be nonnegative")
    ss = np.random.SeedSequence(int(master_seed))
    return ss.generate_state(n_paths, dtype=np.uint64)


def path_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
