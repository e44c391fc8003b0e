"""Deterministic RNG derivation.

Every stochastic component draws from a stream derived from (global seed,
purpose key, optional sample key), so reordering or parallelising work never
changes results. String keys are hashed with blake2 so streams are stable
across processes and platforms (unlike the builtin, salted `hash`).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(key: int | str) -> list[int]:
    if isinstance(key, (int, np.integer)):
        return [int(key) & 0xFFFFFFFF, (int(key) >> 32) & 0xFFFFFFFF]
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def seed_sequence(*keys: int | str) -> np.random.SeedSequence:
    entropy: list[int] = []
    for key in keys:
        entropy.extend(_key_words(key))
    return np.random.SeedSequence(entropy)


def generator(*keys: int | str) -> np.random.Generator:
    """A numpy Generator on a stream unique to ``keys``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(*keys)))


def derive_seed(*keys: int | str) -> int:
    """A 63-bit integer seed for APIs that take one (e.g. torch.manual_seed)."""
    return int(seed_sequence(*keys).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
