"""Deterministic RNG derivation.

Every stochastic choice in the package (initialization, data sampling,
dropout, shuffling, random trials in the certification suite) draws from a
generator derived here from one master seed plus a label path.  Labels are
hashed, so adding a new consumer never shifts the streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(labels: tuple) -> int:
    digest = hashlib.sha256(repr(labels).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(master: int, *labels) -> np.random.SeedSequence:
    """Child seed sequence for ``labels`` under ``master``."""
    return np.random.SeedSequence(entropy=int(master), spawn_key=(_label_key(labels),))


def rng(master: int, *labels) -> np.random.Generator:
    """Generator for the stream identified by ``labels``."""
    return np.random.default_rng(seed_sequence(master, *labels))
