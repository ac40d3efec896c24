"""End-to-end concept fine-tuning on mixed image and clip batches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..losses import LossWeights, mask_terms, score_bce
from ..matching import mask_cost, match
from ..memory.stage2 import stage2_step
from ..model import StudentModel, student_features
from ..numerics import tensor as T
from ..numerics.nn import linear
from ..numerics.tensor import Tensor
from .detector import concept_vector, detector_forward
from .scenes import SceneConfig, SyntheticScene, hard_negative_concepts, rasterize

EXEMPLAR_CROP = 64


@dataclass
class ConceptQuery:
    concept_id: int
    positive: bool
    exemplar_boxes: list[tuple[int, int]] = field(default_factory=list)  # crop top-left corners


@dataclass
class Stage3Batch:
    images: list[SyntheticScene] = field(default_factory=list)
    queries: list[list[ConceptQuery]] = field(default_factory=list)  # per image
    clips: list[list[SyntheticScene]] = field(default_factory=list)


def exemplar_corner(mask: np.ndarray, crop: int = EXEMPLAR_CROP) -> tuple[int, int]:
    """Top-left (row, col) of a crop centred on the instance, clamped to the image."""
    rows, cols = np.nonzero(mask)
    n = mask.shape[0]
    r = int(np.clip(round(rows.mean()) - crop // 2, 0, n - crop))
    c = int(np.clip(round(cols.mean()) - crop // 2, 0, mask.shape[1] - crop))
    return r, c


def exemplar_embedding(model: StudentModel, image: np.ndarray, corner: tuple[int, int]) -> Tensor:
    """Crop -> student encoder -> mean-pooled features -> concept space, (1, concept_dim)."""
    r, c = corner
    crop = image[r : r + EXEMPLAR_CROP, c : c + EXEMPLAR_CROP]
    f = student_features(model, Tensor(crop[None]))
    pooled = T.mean(T.reshape(f, (-1, f.shape[-1])), axis=0, keepdims=True)
    return linear(pooled, model["concept_embedding"], "exemplar")


def sample_queries(
    scene: SyntheticScene,
    config: SceneConfig,
    rng: np.random.Generator,
    negatives: int = 1,
    exemplar_prob: float = 0.5,
) -> list[ConceptQuery]:
    """Every present concept, plus ``negatives`` absent ones (hard negatives preferred).

    Positive queries get one or two exemplar crops with probability ``exemplar_prob``.
    """
    out = []
    for cid in sorted(scene.concepts()):
        boxes = []
        if rng.random() < exemplar_prob:
            insts = [i for i in scene.instances if i.concept_id == cid]
            k = min(len(insts), int(rng.integers(1, 3)))
            for j in rng.choice(len(insts), size=k, replace=False):
                boxes.append(exemplar_corner(insts[int(j)].mask))
        out.append(ConceptQuery(cid, True, boxes))
    hard = hard_negative_concepts(scene, config)
    pool = hard or [c for c in range(config.num_concepts) if c not in scene.concepts()]
    if pool and negatives:
        for cid in rng.choice(pool, size=min(negatives, len(pool)), replace=False):
            out.append(ConceptQuery(int(cid), False))
    return out


def image_concept_loss(model: StudentModel, feat, scene: SyntheticScene, query: ConceptQuery, w: LossWeights, exemplars=None):
    """(mask term or None, presence BCE, localization BCE) for one concept on one image."""
    stride = model.config.stride
    presence, loc, masks = detector_forward(model, feat, concept_vector(model, query.concept_id, exemplars))
    gts = [rasterize(i.mask, stride) for i in scene.instances if i.concept_id == query.concept_id]
    pres_l = score_bce(presence, np.array([1.0 if gts else 0.0]))
    loc_target = np.zeros(loc.shape[0])
    mask_l = None
    if query.positive and gts:
        probs = [1.0 / (1.0 + np.exp(-np.clip(masks.data[q], -50, 50))) for q in range(masks.shape[0])]
        sigma = match(mask_cost(probs, gts, w))
        terms = []
        for q, j in enumerate(sigma):
            if j >= 0:
                loc_target[q] = 1.0
                terms.append(mask_terms(masks[q], gts[j], w))
        mask_l = T.add_n(terms) * (1.0 / len(terms))
    loc_l = score_bce(loc, loc_target)
    return mask_l, pres_l, loc_l


def stage3_step(
    batch: Stage3Batch,
    model: StudentModel,
    teacher,
    w: LossWeights,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Image part (mask + presence + localization, each averaged) plus mean clip tracking loss."""
    n_pos = sum(q.positive for qs in batch.queries for q in qs)
    n_neg = sum(not q.positive for qs in batch.queries for q in qs)
    if n_pos == 0 and n_neg == 0 and not batch.clips:
        raise ValueError("stage3_step: batch has no positive concept instance and no negatives")
    if len(batch.queries) != len(batch.images):
        raise ValueError("stage3_step: one query list per image is required")
    parts, info = [], {"mask": 0.0, "score": 0.0, "track": 0.0}
    if batch.images and (n_pos or n_neg):
        feats = student_features(model, Tensor(np.stack([s.image for s in batch.images])))
        mask_l, pres_l, loc_l = [], [], []
        for b, (scene, queries) in enumerate(zip(batch.images, batch.queries)):
            for q in queries:
                ex = [exemplar_embedding(model, scene.image, c) for c in q.exemplar_boxes]
                m, p, l = image_concept_loss(model, feats[b], scene, q, w, ex)
                if m is not None:
                    mask_l.append(m)
                pres_l.append(p)
                loc_l.append(l)
        score = (T.add_n(pres_l) + T.add_n(loc_l)) * (1.0 / len(pres_l))
        image_part = score
        info["score"] = score.item()
        if mask_l:
            mask = T.add_n(mask_l) * (1.0 / len(mask_l))
            image_part = image_part + mask
            info["mask"] = mask.item()
        parts.append(image_part)
    if batch.clips:
        clip_l = [stage2_step(c, model, teacher, w, rng)[0] for c in batch.clips]
        track = T.add_n(clip_l) * (1.0 / len(clip_l))
        parts.append(track)
        info["track"] = track.item()
    total = T.add_n(parts)
    info["total"] = total.item()
    return total, info


def presence_eval(model: StudentModel, scenes: list[SyntheticScene], config: SceneConfig, rng: np.random.Generator):
    """Mean presence BCE over each scene's positive concepts and one hard negative, plus all detections."""
    from ..numerics.tensor import no_record
    from .detector import StudentDetector, detect

    bces, records = [], []
    det = StudentDetector(model)
    with no_record():
        feats = student_features(model, Tensor(np.stack([s.image for s in scenes])))
        for b, scene in enumerate(scenes):
            queries = sample_queries(scene, config, rng, negatives=1, exemplar_prob=0.0)
            for q in queries:
                presence, dets = detect(feats.data[b], q.concept_id, det, stride=model.config.stride)
                p = min(max(presence, 1e-12), 1 - 1e-12)
                target = 1.0 if q.concept_id in scene.concepts() else 0.0
                bces.append(-(target * np.log(p) + (1 - target) * np.log(1 - p)))
                records.append((presence, dets))
    return float(np.mean(bces)), records
