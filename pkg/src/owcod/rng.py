"""Named, splittable random streams derived from one experiment seed."""

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, names...)``; same key, same stream."""
    key = tuple(n if isinstance(n, int) else zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
