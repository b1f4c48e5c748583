"""Named, counter-addressed random streams.

All randomness flows from one root seed. A stream is addressed by a
name plus integer counters (e.g. ("sample", concept_idx, seed_idx)),
so any cell of the bench can be re-run in isolation and reproduce its
draws exactly. Stream identity is hashed stably (not Python ``hash``).
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("train", "ti", "sample", "perturb", "irece", "data", "classifier", "erase")


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def stream(root_seed: int, name: str, *counters: int) -> np.random.Generator:
    """Return a fresh Generator for (root_seed, name, *counters)."""
    seq = np.random.SeedSequence(
        entropy=int(root_seed),
        spawn_key=(_name_key(name), *[int(c) & 0xFFFFFFFF for c in counters]),
    )
    return np.random.Generator(np.random.Philox(seq))
