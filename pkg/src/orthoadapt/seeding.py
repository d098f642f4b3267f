"""Single-seed determinism.

Every random draw in the package comes from a named substream derived from
one 64-bit root seed: the stream for (seed, tag_1, ..., tag_k) is a PCG64
generator seeded with SeedSequence(entropy=seed, spawn_key=(crc32(repr(tag_1)),
..., crc32(repr(tag_k)))). Identical (seed, tags) always yields identical
draws, independent of call order elsewhere in the program.
"""

import zlib

import numpy as np


def _spawn_key(tags):
    return tuple(zlib.crc32(repr(t).encode("utf-8")) for t in tags)


def substream(seed, *tags):
    """Generator for the substream named by ``tags`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=_spawn_key(tags))
    return np.random.default_rng(ss)


def derive_seed(seed, *tags):
    """Collapse (seed, tags) into a fresh 64-bit seed for a nested component."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=_spawn_key(tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
