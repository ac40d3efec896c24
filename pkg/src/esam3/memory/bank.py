"""Per-object memory bank and the memory encoder that fills it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import tensor as T
from ..numerics.nn import ParamGroup, conv, conv_init, linear, linear_init
from ..numerics.tensor import ShapeError, Tensor

DEFAULT_CAPACITY = 7


@dataclass
class MemoryEntry:
    features: Tensor  # (h, w, C)
    frame_index: int
    object_id: int


@dataclass
class MemoryBank:
    capacity: int = DEFAULT_CAPACITY
    object_id: int | None = None
    entries: list[MemoryEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("bank capacity must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def stacked(self) -> Tensor:
        """(n_entries, h, w, C)."""
        if not self.entries:
            raise ValueError("empty memory bank")
        return T.concat([T.reshape(e.features, (1,) + e.features.shape) for e in self.entries], axis=0)


def bank_update(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    """Append ``entry``; evict the oldest entry beyond capacity. Returns a new bank."""
    if bank.object_id is not None and entry.object_id != bank.object_id:
        raise ValueError(f"entry for object {entry.object_id} pushed to bank of object {bank.object_id}")
    if bank.entries and entry.frame_index <= bank.entries[-1].frame_index:
        raise ValueError(
            f"out-of-order memory update: frame {entry.frame_index} after {bank.entries[-1].frame_index}"
        )
    entries = (bank.entries + [entry])[-bank.capacity :]
    return MemoryBank(bank.capacity, entry.object_id, entries)


def init_memory_encoder(g: ParamGroup, feat_dim: int, mem_dim: int, rng: np.random.Generator) -> None:
    conv_init(g, rng, "mem.conv", 3, feat_dim + 1, mem_dim)
    linear_init(g, rng, "mem.out", mem_dim, mem_dim)


def memory_encode(g: ParamGroup, frame_feat, mask, frame_index: int = 0, object_id: int = 0) -> MemoryEntry:
    """Conv over [frame features, mask channel], then a per-cell linear layer."""
    f = T.tensor(frame_feat)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if f.ndim != 3 or m.shape != f.shape[:2]:
        raise ShapeError("memory_encode", f.shape, m.shape, detail="mask must match the feature grid")
    h, w, c = f.shape
    x = T.concat([T.reshape(f, (1, h, w, c)), m.reshape(1, h, w, 1)], axis=-1)
    y = T.relu(conv(x, g, "mem.conv", pad=1))
    out = linear(T.reshape(y, (h, w, y.shape[-1])), g, "mem.out")
    return MemoryEntry(out, frame_index, object_id)
