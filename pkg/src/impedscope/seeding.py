"""Named random substreams derived from one root seed.

A stream is addressed by a purpose name plus integer coordinates (trial,
fold, ...). Streams never depend on call order, so adding a stage or
changing the worker count leaves every other stream untouched.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str, coords) -> tuple[int, ...]:
    return (zlib.crc32(name.encode("utf-8")),) + tuple(int(c) for c in coords)


def substream(root: int, name: str, *coords) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=_key(name, coords)))


def subseed(root: int, name: str, *coords) -> int:
    """A 32-bit integer seed for APIs that take plain ints."""
    ss = np.random.SeedSequence(int(root), spawn_key=_key(name, coords))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
