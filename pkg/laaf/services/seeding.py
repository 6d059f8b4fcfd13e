# laaf/services/seeding.py
"""Named random sub-streams derived from one run seed.

Every component draws from its own stream ("init", "data", "sampling", "noise",
"batches", ...) so changing how one component consumes randomness never shifts
another. Streams are PCG64 generators keyed by a SeedSequence over
(seed, sha256(name)[:8]), which is bit-reproducible across platforms.
"""
from __future__ import annotations

import hashlib

import numpy as np

from ..errors import DomainError


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise DomainError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name),))
    return np.random.Generator(np.random.PCG64(sequence))
