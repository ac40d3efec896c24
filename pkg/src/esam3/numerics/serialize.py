"""Tensor files: a one-line JSON header followed by raw little-endian float64 data."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .tensor import Tensor

_DTYPE = "<f8"


class CorruptTensorError(ValueError):
    pass


def to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
    header = {
        "shape": list(arr.shape),
        "dtype": _DTYPE,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    return json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def from_bytes(blob: bytes) -> Tensor:
    head, sep, payload = blob.partition(b"\n")
    if not sep:
        raise CorruptTensorError("missing header terminator")
    try:
        header = json.loads(head)
        shape = tuple(int(n) for n in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptTensorError(f"bad header: {exc}") from None
    if header.get("dtype", _DTYPE) != _DTYPE:
        raise CorruptTensorError(f"unsupported dtype {header.get('dtype')!r}")
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise CorruptTensorError(f"payload is {len(payload)} bytes, header implies {expected}")
    digest = header.get("sha256")
    if digest is not None and hashlib.sha256(payload).hexdigest() != digest:
        raise CorruptTensorError("checksum mismatch")
    return Tensor(np.frombuffer(payload, dtype=_DTYPE).astype(np.float64).reshape(shape))


def save(t: Tensor | np.ndarray, path: str | os.PathLike) -> None:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(to_bytes(t))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Tensor:
    return from_bytes(Path(path).read_bytes())
