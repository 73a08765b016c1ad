"""Deterministic, labelled random streams.

Every random decision in the package flows from one master seed. Sub-streams
are derived by hashing (seed, label, ...) so independent consumers never share
a stream and results do not depend on call order, thread scheduling, or the
host OS RNG.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "stream"]


def derive_seed(master: int, *labels) -> int:
    """Derive a 63-bit sub-seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    # 63 bits so the value is also a valid torch.Generator seed
    return int.from_bytes(h.digest()[:8], "little") & ((1 << 63) - 1)


def stream(master: int, *labels) -> np.random.Generator:
    """A Philox generator for the given label path (platform-independent)."""
    return np.random.Generator(np.random.Philox(derive_seed(master, *labels)))
