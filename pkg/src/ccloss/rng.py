"""Deterministic counter-based random streams.

Every stochastic choice in the library (weight init, shuffling, flips,
synthetic data) draws from its own named Philox stream, keyed by
``(seed, stream id, index)``. Streams never interact, so adding draws to
one (say, augmentation) cannot perturb another (say, initialization).
"""

from __future__ import annotations

import numpy as np

# Stable stream ids; never renumber, or saved seeds stop reproducing.
STREAM_IDS = {
    "init": 0,
    "shuffle": 1,
    "flip": 2,
    "crop": 3,
    "blob-noise": 4,
    "eval": 5,
    "bench": 6,
}


def stream_gen(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Generator for the named stream. `index` separates per-epoch/per-split uses."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    if stream not in STREAM_IDS:
        raise KeyError(f"unknown rng stream {stream!r}")
    sid = STREAM_IDS[stream]
    key = np.array(
        [np.uint64(seed), np.uint64((sid << 48) | (index & 0xFFFFFFFFFFFF))],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
