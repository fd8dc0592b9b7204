"""Hierarchical, order-independent random streams.

A stream is identified by a root seed plus a path such as
``("rabi", 3)`` or ``("bootstrap", 17)``.  Streams with different paths are
statistically independent and do not depend on the order in which they are
created, so grid points, shots and resamples can be evaluated in any order
(or in parallel) and still reproduce the same numbers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_key(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("boolean stream path components are ambiguous")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path index must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        # crc32 is stable across interpreter runs (unlike hash()).
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream path component {part!r}")


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_path_key(p) for p in path))


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for ``(seed, *path)``.

    >>> a = stream(7, "rabi", 0).random()
    >>> b = stream(7, "rabi", 0).random()
    >>> a == b
    True
    """
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))
