"""Latent cross-attention compression of memory features.

``dense_compress_baseline`` lets every latent attend to all memory tokens.
``spatial_compress`` keeps a few such global latents and gives the rest to
non-overlapping spatial windows, each window's latents attending only to the
tokens (of every stored frame) inside that window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numerics import tensor as T
from ..numerics.nn import ParamGroup, dropout_mask
from ..numerics.tensor import ShapeError, Tensor
from .bank import init_memory_encoder


@dataclass
class LatentSet:
    q_lat: Tensor  # (K, C)
    k_global: int
    window: tuple[int, int]  # (h_w, w_w) in feature cells

    @property
    def k(self) -> int:
        return self.q_lat.shape[0]

    @property
    def k_local(self) -> int:
        return self.k - self.k_global


@dataclass
class PerceiverWeights:
    w_q: Tensor  # (C, d_k)
    w_k: Tensor  # (C, d_k)
    w_v: Tensor  # (C, C)
    dropout_p: float = 0.1

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]


def init_perceiver(g: ParamGroup, cfg, rng: np.random.Generator) -> None:
    c, dk = cfg.mem_dim, cfg.d_k
    init_memory_encoder(g, cfg.teacher_dim, c, rng)
    g.add("latents", rng.standard_normal((cfg.num_latents, c)))
    g.add("w_q", rng.standard_normal((c, dk)) / math.sqrt(c))
    g.add("w_k", rng.standard_normal((c, dk)) / math.sqrt(c))
    g.add("w_v", rng.standard_normal((c, c)) / math.sqrt(c))


def latent_set(g: ParamGroup, cfg) -> LatentSet:
    gh, gw = cfg.window_grid
    return LatentSet(g["latents"], cfg.k_global, (cfg.feature_size // gh, cfg.feature_size // gw))


def perceiver_weights(g: ParamGroup, cfg) -> PerceiverWeights:
    return PerceiverWeights(g["w_q"], g["w_k"], g["w_v"], cfg.perceiver_dropout)


def _flatten(f_mem: Tensor) -> Tensor:
    if f_mem.ndim == 2:
        return f_mem
    return T.reshape(f_mem, (-1, f_mem.shape[-1]))


def cross_attend(latents, tokens, weights: PerceiverWeights, rng=None, return_weights: bool = False):
    """softmax((L W_Q)(X W_K)^T / sqrt(d_k)) (X W_V), batched over leading axes."""
    if weights.w_q.shape[1] != weights.w_k.shape[1]:
        raise ShapeError("cross_attend", weights.w_q.shape, weights.w_k.shape, detail="W_Q and W_K must share d_k")
    q = T.matmul(latents, weights.w_q)
    k = T.matmul(tokens, weights.w_k)
    v = T.matmul(tokens, weights.w_v)
    nd = k.ndim
    kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    attn = T.row_softmax(T.matmul(q, kt) * (1.0 / math.sqrt(weights.d_k)))
    mask = dropout_mask(rng, attn.shape, weights.dropout_p)
    used = attn if mask is None else attn * mask
    out = T.matmul(used, v)
    return (out, attn) if return_weights else out


def dense_compress_baseline(f_mem, latents, weights: PerceiverWeights, rng=None, return_weights: bool = False):
    """(K, C) summary of all memory tokens; ``f_mem`` is (N, C), (H, W, C) or (T, H, W, C)."""
    return cross_attend(latents, _flatten(T.tensor(f_mem)), weights, rng, return_weights)


def _windows(f_mem: Tensor, window: tuple[int, int]) -> Tensor:
    """(T, H, W, C) -> (n_windows, T*h_w*w_w, C), windows in row-major order."""
    t, h, w, c = f_mem.shape
    hw, ww = window
    x = T.reshape(f_mem, (t, h // hw, hw, w // ww, ww, c))
    x = T.transpose(x, (1, 3, 0, 2, 4, 5))
    return T.reshape(x, ((h // hw) * (w // ww), t * hw * ww, c))


def spatial_compress(f_mem, latents: LatentSet, weights: PerceiverWeights, rng=None) -> Tensor:
    """First ``k_global`` rows attend to every token, the remaining rows to their own window."""
    f = T.tensor(f_mem)
    if f.ndim == 3:
        f = T.reshape(f, (1,) + f.shape)
    if f.ndim != 4:
        raise ShapeError("spatial_compress", f.shape, detail="expects (H, W, C) or (T, H, W, C)")
    if latents.k_local == 0:
        return dense_compress_baseline(f, latents.q_lat, weights, rng)
    _, h, w, _ = f.shape
    hw, ww = latents.window
    if h % hw or w % ww:
        ph, pw = -(-h // hw) * hw, -(-w // ww) * ww
        raise ShapeError(
            "spatial_compress", (h, w), (hw, ww), detail=f"window must tile the map; pad the map to ({ph}, {pw})"
        )
    n_win = (h // hw) * (w // ww)
    if latents.k_local % n_win:
        raise ShapeError(
            "spatial_compress", (latents.k_local,), (n_win,), detail="local latents must split evenly over windows"
        )
    k_per = latents.k_local // n_win
    parts = []
    if latents.k_global:
        parts.append(dense_compress_baseline(f, latents.q_lat[: latents.k_global], weights, rng))
    local_q = T.reshape(latents.q_lat[latents.k_global :], (n_win, k_per, latents.q_lat.shape[1]))
    local = cross_attend(local_q, _windows(f, latents.window), weights, rng)
    parts.append(T.reshape(local, (latents.k_local, local.shape[-1])))
    return T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
