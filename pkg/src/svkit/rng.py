"""Seed fan-out.

Every random decision in the toolkit flows from one master seed through
named sub-seeds, so any stage can be reproduced in isolation. Hashing is
used instead of numpy's spawn mechanism so that the mapping from
(master, name) to child seed is stable across numpy versions.
"""

import hashlib

import numpy as np


def derive_seed(master: int, name: str) -> int:
    """Stable 64-bit child seed for a named random stream."""
    digest = hashlib.sha256(f"{master}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, name))
