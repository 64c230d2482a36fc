"""Seed derivation: every random draw in the package traces to one global seed.

Streams are derived from (seed, *labels) so independent components never share
state and runs are reproducible regardless of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit seed for a named substream of ``seed``."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Fresh generator for the substream named by ``labels``."""
    return np.random.default_rng(derive_seed(seed, *labels))
