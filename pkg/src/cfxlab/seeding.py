"""Deterministic seed derivation for independent RNG streams.

Every stochastic component takes an integer seed; sub-streams are derived
with `derive_seed(seed, *labels)` so that changing one stage never shifts
the randomness of another.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

_SEED_MOD = 2**31 - 1


def derive_seed(seed: int, *labels) -> int:
    """Derive a stable sub-seed from a base seed and a sequence of labels."""
    key = ":".join(str(x) for x in (seed, *labels)).encode()
    return zlib.crc32(key) % _SEED_MOD


def np_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


def torch_generator(seed: int, *labels) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *labels))
    return gen
