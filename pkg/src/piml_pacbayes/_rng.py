"""Counter-based seed derivation so serial and parallel draws agree."""

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; keys may be ints or strings."""
    return np.random.default_rng([int(seed)] + [_key(k) for k in keys])


def derive_seed(seed: int, *keys) -> int:
    return int(np.random.SeedSequence([int(seed)] + [_key(k) for k in keys]).generate_state(1)[0])
