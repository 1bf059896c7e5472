"""Stage-namespaced random generators."""

import zlib

import numpy as np


def stage_rng(seed: int, stage: str, *idx: int) -> np.random.Generator:
    """Generator keyed on (seed, stage name, indices) so stages can be reseeded independently."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(stage.encode()), *[int(i) for i in idx]])
