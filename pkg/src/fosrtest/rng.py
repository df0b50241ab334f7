"""Seeded counter-based random streams.

Every random quantity in the package is drawn from a Philox generator whose
key is derived from ``(seed, *path)`` through :class:`numpy.random.SeedSequence`.
Two streams with different paths are statistically independent, and a stream
depends only on its path, never on how many other streams were drawn before it
or on which worker computes it.
"""

from __future__ import annotations

import os

import numpy as np

THREADS_ENV = "FOSR_THREADS"


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return an independent Philox generator addressed by ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """Deterministic 63-bit integer seed for a child task."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def fresh_seed() -> int:
    """Draw a seed from OS entropy (used when the caller gave none)."""
    return int(np.random.SeedSequence().generate_state(1, dtype=np.uint32)[0])


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))
