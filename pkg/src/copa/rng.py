"""Single-seed randomness discipline.

Every random draw in the package flows from one base seed through
``derive_seed(base, *tags)``.  Tags name the purpose of the stream
("site", "train-batches", ...) plus any indices, so independent stages get
independent, reproducible streams and adding a stage never perturbs others.
"""
from __future__ import annotations

import zlib

import numpy as np


def _encode_tag(tag: int | str) -> int:
    if isinstance(tag, bool):
        raise TypeError("bool seed tags are ambiguous")
    if isinstance(tag, int):
        return tag & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"seed tags must be int or str, got {type(tag).__name__}")


def seed_sequence(base_seed: int, *tags: int | str) -> np.random.SeedSequence:
    entropy = [_encode_tag(base_seed)] + [_encode_tag(t) for t in tags]
    return np.random.SeedSequence(entropy)


def derive_seed(base_seed: int, *tags: int | str) -> int:
    """A 64-bit sub-seed for the stream named by ``tags``."""
    return int(seed_sequence(base_seed, *tags).generate_state(1, np.uint64)[0])


def rng_from(base_seed: int, *tags: int | str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(base_seed, *tags))
