# app/seeding.py
"""Named random streams split from one global seed.

Each consumer asks for its own stream by name ("init", "sampling", "shuffling", ...), so
adding a consumer never shifts the numbers another consumer sees.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))


def child_seed(seed: int, name: str) -> int:
    """Integer seed for APIs that take one (stored in model metadata)."""
    return int(stream(seed, name).integers(0, 2**31 - 1))
