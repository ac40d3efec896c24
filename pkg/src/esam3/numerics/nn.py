"""Parameter containers and small building blocks shared by every model."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamGroup(dict):
    """Named parameters of one trainable module (encoder, decoder, ...)."""

    def __init__(self, name: str, params: dict[str, Tensor] | None = None) -> None:
        super().__init__(params or {})
        self.name = name

    def add(self, key: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=f"{self.name}.{key}")
        self[key] = t
        return t

    def set_trainable(self, flag: bool) -> None:
        for t in self.values():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def num_params(self) -> int:
        return int(sum(t.size for t in self.values()))


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(gain / fan_in)


def linear_init(g: ParamGroup, rng, key: str, n_in: int, n_out: int, bias: bool = True, gain: float = 1.0) -> None:
    g.add(f"{key}.w", he_normal(rng, (n_in, n_out), n_in, gain))
    if bias:
        g.add(f"{key}.b", np.zeros(n_out))


def conv_init(g: ParamGroup, rng, key: str, k: int, c_in: int, c_out: int, gain: float = 2.0) -> None:
    g.add(f"{key}.w", he_normal(rng, (k, k, c_in, c_out), k * k * c_in, gain))
    g.add(f"{key}.b", np.zeros(c_out))


def linear(x, g: ParamGroup, key: str) -> Tensor:
    y = T.matmul(x, g[f"{key}.w"])
    b = g.get(f"{key}.b")
    return y if b is None else y + b


def conv(x, g: ParamGroup, key: str, stride: int = 1, pad: int = 0) -> Tensor:
    return T.conv2d(x, g[f"{key}.w"], stride=stride, pad=pad) + g[f"{key}.b"]


def attention(q, k, v, dropout_mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    d = q.shape[-1]
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    w = T.row_softmax(T.matmul(q, kt) * (1.0 / math.sqrt(d)))
    if dropout_mask is not None:
        w = w * dropout_mask
    return T.matmul(w, v)


def fourier_features(coords: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding of normalized (x, y) coordinates in [0, 1].

    coords: (..., 2) -> (..., dim). dim must be a multiple of 4.
    """
    if dim % 4:
        raise ValueError("positional dim must be a multiple of 4")
    n = dim // 4
    freqs = np.pi * (2.0 ** np.arange(n) / 2.0)
    xs = coords[..., :1] * freqs
    ys = coords[..., 1:2] * freqs
    return np.concatenate([np.sin(xs), np.cos(xs), np.sin(ys), np.cos(ys)], axis=-1)


def grid_positions(h: int, w: int, dim: int) -> np.ndarray:
    """Encoding of cell centres of an h x w grid, flattened row-major to (h*w, dim)."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return fourier_features(np.stack([xs, ys], axis=-1).reshape(-1, 2), dim)


def dropout_mask(rng: np.random.Generator | None, shape, p: float) -> np.ndarray | None:
    if rng is None or p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)
