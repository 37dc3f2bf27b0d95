"""Named random sub-streams derived from one root seed."""

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` under root ``seed``.

    The same (seed, name) pair always yields the same stream, and re-seeding
    one component never shifts the draws of another.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_key(name),)))
