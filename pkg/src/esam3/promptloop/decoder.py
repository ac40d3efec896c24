"""Prompt-conditioned mask decoder (student and trained-teacher share it)."""

from __future__ import annotations

import numpy as np

from ..numerics import tensor as T
from ..numerics.nn import ParamGroup, attention, conv, conv_init, fourier_features, linear, linear_init
from ..numerics.tensor import Tensor
from .prompts import PromptSet

_KIND_INDEX = {"positive_point": 0, "negative_point": 1}
_BOX_TL, _BOX_BR = 2, 3
_BUMP_SIGMA = 1.0  # in feature cells


def init_prompt_decoder(g: ParamGroup, cfg, rng: np.random.Generator, prefix: str = "pd") -> None:
    d = cfg.embed_dim
    linear_init(g, rng, f"{prefix}.in", cfg.teacher_dim, d)
    g.add(f"{prefix}.type", rng.standard_normal((4, d)) * 0.5)
    g.add(f"{prefix}.mask_token", rng.standard_normal((1, d)) * 0.5)
    linear_init(g, rng, f"{prefix}.concept", cfg.concept_dim, d, bias=False)
    for k in ("q", "k", "v", "o"):
        linear_init(g, rng, f"{prefix}.ca.{k}", d, d, bias=False)
    linear_init(g, rng, f"{prefix}.mlp1", d, 2 * d, gain=2.0)
    linear_init(g, rng, f"{prefix}.mlp2", 2 * d, d)
    for k in ("q", "k", "v"):
        linear_init(g, rng, f"{prefix}.ia.{k}", d, d, bias=False)
    linear_init(g, rng, f"{prefix}.dense", 3, d, bias=False)
    conv_init(g, rng, f"{prefix}.conv", 3, d, d)
    linear_init(g, rng, f"{prefix}.hyper", d, d)
    g.add(f"{prefix}.out_bias", np.zeros(1))


def image_tokens(g: ParamGroup, feats, pos: np.ndarray, prefix: str = "pd") -> Tensor:
    """(h, w, C) features -> (h*w, D) tokens with positional encoding added."""
    h, w, c = feats.shape
    return linear(T.reshape(feats, (h * w, c)), g, f"{prefix}.in") + pos


def _prompt_arrays(prompts: PromptSet, image_size: int, dim: int):
    coords, kinds = [], []
    for p in prompts.prompts:
        if p.kind == "box":
            x1, y1, x2, y2 = p.coords
            coords += [(x1 + 0.5, y1 + 0.5), (x2 + 0.5, y2 + 0.5)]
            kinds += [_BOX_TL, _BOX_BR]
        else:
            coords.append((p.coords[0] + 0.5, p.coords[1] + 0.5))
            kinds.append(_KIND_INDEX[p.kind])
    pe = fourier_features(np.asarray(coords) / image_size, dim)
    return pe, np.asarray(kinds, dtype=np.int64)


def dense_prompt_maps(prompts: PromptSet, size: int, stride: int) -> np.ndarray:
    """(size*size, 3): positive-click bumps, negative-click bumps, box interior."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    maps = np.zeros((3, size, size))
    for p in prompts.prompts:
        if p.kind == "box":
            x1, y1, x2, y2 = (c / stride for c in p.coords)
            maps[2] = np.maximum(maps[2], ((xs >= x1) & (xs <= x2 + 1 / stride) & (ys >= y1) & (ys <= y2 + 1 / stride)))
        else:
            cx, cy = (p.coords[0] + 0.5) / stride, (p.coords[1] + 0.5) / stride
            bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * _BUMP_SIGMA**2))
            maps[0 if p.kind == "positive_point" else 1] += bump
    return maps.reshape(3, -1).T.copy()


def decode_prompt(
    g: ParamGroup,
    concept_table: Tensor,
    x_img: Tensor,
    prompts: PromptSet,
    *,
    size: int,
    image_size: int,
    prefix: str = "pd",
) -> Tensor:
    """Mask logits (size, size) for one prompt set.

    Prompt and concept tokens cross-attend to the image tokens, then the image
    tokens attend back to the updated prompt tokens. A hypernetwork on the
    output token turns per-cell embeddings into logits.
    """
    d = x_img.shape[-1]
    stride = image_size // size
    pe, kinds = _prompt_arrays(prompts, image_size, d)
    ptoks = T.slice(g[f"{prefix}.type"], kinds) + pe
    ctok = T.matmul(concept_table[prompts.concept_id : prompts.concept_id + 1], g[f"{prefix}.concept.w"])
    toks = T.concat([g[f"{prefix}.mask_token"], ctok, ptoks], axis=0)

    q = T.matmul(toks, g[f"{prefix}.ca.q.w"])
    k = T.matmul(x_img, g[f"{prefix}.ca.k.w"])
    v = T.matmul(x_img, g[f"{prefix}.ca.v.w"])
    toks = toks + T.matmul(attention(q, k, v), g[f"{prefix}.ca.o.w"])
    toks = toks + linear(T.relu(linear(toks, g, f"{prefix}.mlp1")), g, f"{prefix}.mlp2")

    q2 = T.matmul(x_img, g[f"{prefix}.ia.q.w"])
    k2 = T.matmul(toks, g[f"{prefix}.ia.k.w"])
    v2 = T.matmul(toks, g[f"{prefix}.ia.v.w"])
    dense = dense_prompt_maps(prompts, size, stride)
    x = x_img + attention(q2, k2, v2) + T.matmul(dense, g[f"{prefix}.dense.w"])

    hmap = T.relu(conv(T.reshape(x, (1, size, size, d)), g, f"{prefix}.conv", pad=1))
    hyper = linear(toks[0:1], g, f"{prefix}.hyper")  # (1, D)
    logits = T.matmul(T.reshape(hmap, (size * size, d)), T.transpose(hyper)) + g[f"{prefix}.out_bias"]
    return T.reshape(logits, (size, size))
