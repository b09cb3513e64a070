"""Deterministic random-stream derivation.

Every consumer of randomness gets its own generator derived from the run seed
plus a string tag, so per-client work can run in any order (or in parallel)
without changing results.  Tags are hashed with blake2s rather than the
builtin ``hash`` so streams are stable across interpreter runs.
"""

import hashlib

import numpy as np


def stream(seed: int, *tags) -> np.random.Generator:
    """Return a generator for the stream identified by ``(seed, *tags)``."""
    label = "/".join(str(t) for t in tags)
    digest = hashlib.blake2s(label.encode("utf-8"), digest_size=8).digest()
    entropy = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), entropy])))
