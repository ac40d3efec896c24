"""Named random substreams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("data", "init", "prompt", "dropout", "eval")


def stream_id(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; ``extra`` ints (e.g. a step) refine it further."""
    return np.random.default_rng([int(seed), stream_id(name), *(int(e) for e in extra)])
