"""Deterministic seed derivation for independent, reproducible RNG streams."""

from __future__ import annotations

import hashlib

import numpy as np


def _words(part) -> list[int]:
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4)]


def seed_sequence(*parts) -> np.random.SeedSequence:
    """Build a SeedSequence from any mix of ints and labels.

    The same parts always produce the same stream; distinct labels give
    independent streams, so parallel and serial execution orders agree.
    """
    entropy: list[int] = []
    for part in parts:
        entropy.extend(_words(part))
    return np.random.SeedSequence(entropy)


def make_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(*parts))
