"""Splittable, counter-based random streams.

Every stochastic stage (dataset generation, training noise, evaluation
rollouts) derives its own independent generator from a root seed plus a
path of labels, so reruns reproduce exactly and stages never share state.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return a Philox generator for (seed, path...).

    Streams with different paths are statistically independent; the same
    (seed, path) always yields the same generator state.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_as_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
