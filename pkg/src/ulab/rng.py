"""Seeded, counter-based random streams.

Every random draw in the package goes through a named stream derived from a
master seed. Streams are Philox generators keyed by a ``SeedSequence`` whose
spawn key is built from the stream names, so two streams with different names
are independent and the same ``(seed, names)`` always reproduces the same
numbers regardless of the order in which streams are created.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError("stream ids must be nonnegative")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8")) | (1 << 32)


def stream(seed: int, *names) -> np.random.Generator:
    """Return the generator for ``(seed, *names)``.

    Names may be strings or nonnegative integers; strings are hashed with
    CRC32 and tagged so they never collide with small integer ids.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_name_key(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise ValueError("an explicit seed or Generator is required")
    return stream(int(rng))
