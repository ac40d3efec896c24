"""Memory-conditioned mask decoding for tracking.

Pixel queries of the new frame cross-attend to the memory (compressed latents
or every bank token); an empty memory is replaced by a learned no-memory token.
"""

from __future__ import annotations

import numpy as np

from ..numerics import tensor as T
from ..numerics.nn import ParamGroup, attention, conv, conv_init, linear, linear_init
from ..numerics.tensor import Tensor
from .bank import MemoryBank
from .perceiver import dense_compress_baseline, latent_set, perceiver_weights, spatial_compress


def init_tracking_head(g: ParamGroup, cfg, rng: np.random.Generator) -> None:
    d, c = cfg.embed_dim, cfg.mem_dim
    linear_init(g, rng, "in", cfg.teacher_dim, d)
    linear_init(g, rng, "concept", cfg.concept_dim, d, bias=False)
    linear_init(g, rng, "q", d, cfg.d_k, bias=False)
    linear_init(g, rng, "k", c, cfg.d_k, bias=False)
    linear_init(g, rng, "v", c, d, bias=False)
    linear_init(g, rng, "mlp1", d, 2 * d, gain=2.0)
    linear_init(g, rng, "mlp2", 2 * d, d)
    conv_init(g, rng, "conv", 3, d, d)
    linear_init(g, rng, "out", d, 1)
    linear_init(g, rng, "score", d, 1)
    g.add("no_memory", rng.standard_normal((1, c)) * 0.5)


def memory_tokens(model, bank: MemoryBank, compressed: bool = True, rng=None) -> Tensor | None:
    """Readout keys for ``bank``: (K, C) latents, (T*h*w, C) raw tokens, or None when empty."""
    if not len(bank):
        return None
    cfg = model.config
    per = model["perceiver"]
    f = bank.stacked()
    t, h, w, c = f.shape
    f = f + model.mem_pos.reshape(h, w, c)
    if compressed:
        return spatial_compress(f, latent_set(per, cfg), perceiver_weights(per, cfg), rng)
    return T.reshape(f, (t * h * w, c))


def dense_latents(model, bank: MemoryBank, rng=None) -> Tensor | None:
    """All latents attending to every token (no spatial partition); used for ablations."""
    if not len(bank):
        return None
    cfg = model.config
    per = model["perceiver"]
    f = bank.stacked()
    f = f + model.mem_pos.reshape(f.shape[1:])
    return dense_compress_baseline(f, per["latents"], perceiver_weights(per, cfg), rng)


def track_decode(model, frame_feat, concept_id: int, memory: Tensor | None, concept_vec=None):
    """Returns (mask logits (h, w), track score logit (1,)) for the next frame.

    ``memory`` is the readout key/value set; None selects the no-memory token.
    ``concept_vec`` overrides the concept table row (exemplar-augmented prompts).
    """
    g = model["tracking_head"]
    f = T.tensor(frame_feat)
    h, w, c = f.shape
    if concept_vec is None:
        table = model["concept_embedding"]["table"]
        concept_vec = table[concept_id : concept_id + 1]
    mem = g["no_memory"] if memory is None else memory
    x = linear(T.reshape(f, (h * w, c)), g, "in") + model.pos + T.matmul(concept_vec, g["concept.w"])
    r = attention(T.matmul(x, g["q.w"]), T.matmul(mem, g["k.w"]), T.matmul(mem, g["v.w"]))
    x = x + r
    x = x + linear(T.relu(linear(x, g, "mlp1")), g, "mlp2")
    hmap = T.relu(conv(T.reshape(x, (1, h, w, x.shape[-1])), g, "conv", pad=1))
    flat = T.reshape(hmap, (h * w, x.shape[-1]))
    logits = T.reshape(linear(flat, g, "out"), (h, w))
    score = T.reshape(linear(T.mean(flat, axis=0, keepdims=True), g, "score"), (1,))
    return logits, score
