"""On-disk cache of teacher encoder features, one tensor file per key."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from pathlib import Path
from typing import Callable

from ..numerics import serialize
from ..numerics.tensor import Tensor

log = logging.getLogger(__name__)

CACHE_ENV = "ESAM3_CACHE_DIR"


def cache_key(image_id: str, preprocessing: dict) -> str:
    blob = json.dumps({"image": image_id, "prep": preprocessing}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def default_cache_root() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(os.path.expanduser("~")) / ".cache" / "esam3" / "teacher"


class TeacherCache:
    """``<root>/<hex key>.tensor`` store; concurrent reads, serialized writes.

    Writes go through a temp file and an atomic rename, so a reader sees
    either the old file, the new one, or a miss.
    """

    def __init__(self, root: str | os.PathLike | None = None) -> None:
        self.root = Path(root) if root is not None else default_cache_root()
        self.root.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()
        self._count_lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.corrupt = 0

    def path(self, key: str) -> Path:
        return self.root / f"{key}.tensor"

    def put(self, key: str, value: Tensor) -> None:
        with self._write_lock:
            serialize.save(value, self.path(key))

    def _bump(self, attr: str) -> None:
        with self._count_lock:
            setattr(self, attr, getattr(self, attr) + 1)

    def get(self, key: str, compute: Callable[[], Tensor] | None = None) -> Tensor | None:
        """Cached tensor for ``key``; on a miss (or corrupt entry) run ``compute`` and store it."""
        p = self.path(key)
        if p.exists():
            try:
                value = serialize.load(p)
            except (serialize.CorruptTensorError, OSError) as exc:
                log.warning("corrupt teacher cache entry %s (%s); recomputing", p.name, exc)
                self._bump("corrupt")
            else:
                self._bump("hits")
                return value
        self._bump("misses")
        if compute is None:
            return None
        value = compute()
        self.put(key, value)
        return value

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0
