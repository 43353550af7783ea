"""Per-cell RNG stream derivation."""
import hashlib

import numpy as np


def derive_seed(base_seed: int, sample_index: int, method: str) -> int:
    """64-bit mix of (base seed, sample index, method id).

    Every (sample, method, seed) cell gets its own stream, so results do not
    depend on how cells are batched or scheduled.
    """
    key = f"{int(base_seed)}:{int(sample_index)}:{method}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def sample_rngs(base_seed: int, sample_ids, method: str) -> list:
    return [np.random.default_rng(derive_seed(base_seed, i, method)) for i in sample_ids]
