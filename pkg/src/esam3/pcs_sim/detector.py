"""Identity-agnostic concept detector with a presence head that gates its scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import tensor as T
from ..numerics.nn import ParamGroup, attention, conv, conv_init, linear, linear_init
from ..numerics.tensor import Tensor, no_record
from .scenes import SyntheticScene, rasterize

SCORE_THRESHOLD = 0.5


@dataclass
class Detection:
    box: tuple[int, int, int, int] | None  # (x1, y1, x2, y2) pixels, None for an empty mask
    loc_score: float
    mask: np.ndarray  # (h, w) binary at feature resolution
    presence: float
    concept_id: int = -1

    def __post_init__(self) -> None:
        for v in (self.loc_score, self.presence):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"scores must lie in [0, 1], got {v}")

    @property
    def score(self) -> float:
        return self.presence * self.loc_score


def mask_box(mask: np.ndarray, stride: int) -> tuple[int, int, int, int] | None:
    rows = np.nonzero(np.any(mask > 0, axis=1))[0]
    cols = np.nonzero(np.any(mask > 0, axis=0))[0]
    if not len(rows):
        return None
    return int(cols[0]) * stride, int(rows[0]) * stride, (int(cols[-1]) + 1) * stride - 1, (int(rows[-1]) + 1) * stride - 1


def init_detector(dec: ParamGroup, pres: ParamGroup, cfg, rng: np.random.Generator) -> None:
    d = cfg.embed_dim
    linear_init(dec, rng, "det.in", cfg.teacher_dim, d)
    linear_init(dec, rng, "det.concept", cfg.concept_dim, d, bias=False)
    dec.add("det.queries", rng.standard_normal((cfg.num_queries, d)) * 0.5)
    for k in ("q", "k", "v", "o"):
        linear_init(dec, rng, f"det.ca.{k}", d, d, bias=False)
    linear_init(dec, rng, "det.mlp1", d, 2 * d, gain=2.0)
    linear_init(dec, rng, "det.mlp2", 2 * d, d)
    conv_init(dec, rng, "det.conv", 3, d, d)
    linear_init(dec, rng, "det.hyper", d, d)
    linear_init(dec, rng, "det.loc", d, 1)

    linear_init(pres, rng, "in", cfg.teacher_dim, d)
    linear_init(pres, rng, "concept", cfg.concept_dim, d, bias=False)
    linear_init(pres, rng, "hidden", d, d, gain=2.0)
    linear_init(pres, rng, "out", d, 1)


def concept_vector(model, concept_id: int, exemplars: list[Tensor] | None = None) -> Tensor:
    """Concept table row, averaged with exemplar embeddings when given."""
    row = model["concept_embedding"]["table"][concept_id : concept_id + 1]
    if not exemplars:
        return row
    return T.add_n([row] + list(exemplars)) * (1.0 / (1 + len(exemplars)))


def detector_forward(model, frame_feat, concept: Tensor):
    """(presence logit (1,), loc logits (Q,), mask logits (Q, h, w)) for one frame."""
    dec, pres = model["decoder"], model["presence_head"]
    f = T.tensor(frame_feat)
    h, w, c = f.shape
    flat = T.reshape(f, (h * w, c))

    # per-cell evidence, pooled by a softmax-weighted max
    cells = T.relu(linear(flat, pres, "in") + T.matmul(concept, pres["concept.w"]))
    cell_logits = T.reshape(linear(T.relu(linear(cells, pres, "hidden")), pres, "out"), (1, h * w))
    presence = T.reshape(T.sum(T.row_softmax(cell_logits) * cell_logits, axis=1), (1,))

    ctok = T.matmul(concept, dec["det.concept.w"])
    x = linear(flat, dec, "det.in") + model.pos + ctok
    toks = dec["det.queries"] + ctok
    q = T.matmul(toks, dec["det.ca.q.w"])
    k = T.matmul(x, dec["det.ca.k.w"])
    v = T.matmul(x, dec["det.ca.v.w"])
    toks = toks + T.matmul(attention(q, k, v), dec["det.ca.o.w"])
    toks = toks + linear(T.relu(linear(toks, dec, "det.mlp1")), dec, "det.mlp2")
    d = x.shape[-1]
    hmap = T.relu(conv(T.reshape(x, (1, h, w, d)), dec, "det.conv", pad=1))
    hyper = linear(toks, dec, "det.hyper")
    masks = T.matmul(hyper, T.transpose(T.reshape(hmap, (h * w, d))))
    loc = T.reshape(linear(toks, dec, "det.loc"), (toks.shape[0],))
    return presence, loc, T.reshape(masks, (toks.shape[0], h, w))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


class OracleDetector:
    """Ground-truth detections for one scene: presence and localization are exact."""

    def __init__(self, scene: SyntheticScene, stride: int) -> None:
        self.scene = scene
        self.stride = stride

    def __call__(self, frame_feat, concept_id: int):
        masks = [rasterize(i.mask, self.stride) for i in self.scene.instances if i.concept_id == concept_id]
        presence = 1.0 if masks else 0.0
        return presence, [1.0] * len(masks), masks


class StudentDetector:
    def __init__(self, model, exemplars: list[Tensor] | None = None) -> None:
        self.model = model
        self.exemplars = exemplars

    def __call__(self, frame_feat, concept_id: int):
        with no_record():
            concept = concept_vector(self.model, concept_id, self.exemplars)
            p, loc, masks = detector_forward(self.model, frame_feat, concept)
        presence = float(_sigmoid(p.data[0]))
        return presence, _sigmoid(loc.data).tolist(), list((masks.data >= 0.0).astype(np.float64))


def detect(frame_feat, concept_id: int, detector, score_threshold: float | None = None, stride: int = 16):
    """(presence, detections); every final score is presence times localization.

    ``detector`` is any callable returning (presence, loc scores, masks), such
    as :class:`OracleDetector` or :class:`StudentDetector`.
    """
    presence, locs, masks = detector(frame_feat, concept_id)
    dets = [
        Detection(mask_box(m, stride), float(s), np.asarray(m, dtype=np.float64), float(presence), concept_id)
        for s, m in zip(locs, masks)
    ]
    if score_threshold is not None:
        dets = [d for d in dets if d.score >= score_threshold]
    return float(presence), dets
