"""Named random substreams derived from one 64-bit seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` (e.g. "data", "init", "routing")."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1), spawn_key=(key,)))
