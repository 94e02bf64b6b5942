"""Seeded random streams.

All randomness derives from one 64-bit run seed. A labeled sub-stream is a
PCG64 generator seeded from ``SeedSequence(seed, spawn_key=(crc32(label), *extra))``;
both PCG64 and SeedSequence produce identical output on every platform, and
crc32 (unlike ``hash``) is stable across interpreter runs.
"""
from __future__ import annotations

import zlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def substream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Return the generator for sub-stream ``label`` of run ``seed``."""
    key = (zlib.crc32(label.encode("utf-8")),) + tuple(int(e) & 0xFFFFFFFF for e in extra)
    ss = np.random.SeedSequence(int(seed) & SEED_MASK, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def epoch_seed(seed: int, epoch: int) -> int:
    return (int(seed) ^ int(epoch)) & SEED_MASK
