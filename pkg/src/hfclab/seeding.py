"""Named random streams derived from a single master seed.

Every source of randomness in a run (dataset synthesis, parameter init,
batch shuffling, class order) pulls from its own stream so that adding
draws to one stage never perturbs another.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(master_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream_rng(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master_seed, name))
