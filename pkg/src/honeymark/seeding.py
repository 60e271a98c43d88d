"""Deterministic sub-seed derivation.

Every random stream in an experiment is keyed by a path below the master
seed, e.g. ``derive_seed(master, "pair", 2, "infringing")``. String path
components are mapped to integers with CRC-32, and the path becomes the
``spawn_key`` of a numpy ``SeedSequence`` rooted at the master seed, so
adding a new stream never perturbs existing ones.
"""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"negative seed path component {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(master: int, *path) -> int:
    """Return an unsigned 64-bit seed for the stream named by ``path``."""
    seq = np.random.SeedSequence(int(master), spawn_key=tuple(_key(p) for p in path))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
