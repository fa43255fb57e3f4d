"""Counter-based randomness keyed by (seed, path), not by draw order.

Every random decision in the pipeline derives its own Philox generator from
the root seed plus a structured path (e.g. ("pose", subject, pose_index)),
so any sample is reproducible in isolation and generation may run in any
order or in parallel without changing results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def counter_rng(seed: int, *path) -> np.random.Generator:
    """Philox generator keyed by SHA-256 of the seed and path parts."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    key = np.frombuffer(h.digest()[:16], dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))
