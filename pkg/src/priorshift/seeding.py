"""Deterministic RNG derivation.

Every stochastic component draws from a generator derived from an integer
seed plus a path of string/int tags, so independent components never share
streams and reruns are bit-identical regardless of execution order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def spawn_rng(seed: int, *path) -> np.random.Generator:
    """Generator seeded by (seed, *path); stable across platforms and runs."""
    entropy = [int(seed)] + [_tag_to_int(t) for t in path]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *path) -> int:
    """A derived integer seed, for APIs that take a seed rather than an rng."""
    entropy = [int(seed)] + [_tag_to_int(t) for t in path]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
