"""Seedable, splittable random number streams.

All randomness in the package flows through counter-based Philox generators keyed
by an integer seed plus a path of integer keys (e.g. (seed, image_index) or
(seed, step, "augment")). Streams for distinct paths are independent, and a
stream's output depends only on its path, never on call order elsewhere. This is
what makes per-image parallel generation and checkpoint resume deterministic.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

__all__ = [
    "key_to_int",
    "seed_sequence",
    "numpy_stream",
    "torch_generator",
    "derive_seed",
]


def key_to_int(key) -> int:
    """Map an int or short string key to a stable 32-bit integer."""
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"rng path keys must be int or str, got {type(key).__name__}")


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence([key_to_int(seed), *(key_to_int(k) for k in path)])


def numpy_stream(seed: int, *path) -> np.random.Generator:
    """Counter-based generator for the (seed, *path) stream."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *path)))


def torch_generator(seed: int, *path) -> torch.Generator:
    """Torch generator seeded from the same stream-splitting scheme."""
    state = seed_sequence(seed, *path).generate_state(2, np.uint64)
    gen = torch.Generator()
    gen.manual_seed(int(state[0] >> 1))  # keep within torch's signed-int64 seed range
    return gen


def derive_seed(seed: int, *path) -> int:
    """Integer sub-seed for APIs that take a plain seed."""
    return int(seed_sequence(seed, *path).generate_state(1, np.uint64)[0] >> 1)
