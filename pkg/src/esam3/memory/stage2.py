"""Temporal memory distillation over short clips."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..losses import LossWeights, feature_mse, mask_terms, score_bce
from ..model import StudentModel, student_features
from ..numerics import tensor as T
from ..numerics.tensor import Tensor, no_record
from ..pcs_sim.scenes import SyntheticScene, rasterize
from .bank import MemoryBank, bank_update, memory_encode
from .tracker import memory_tokens, track_decode

MAX_TRACKS = 8
CLIP_LEN_RANGE = (4, 8)


@dataclass
class ClipTargets:
    """Teacher masks per tracked identity and frame, at feature resolution."""

    identities: list[int]
    concepts: list[int]
    masks: np.ndarray  # (n_objects, T, h, w)

    @property
    def num_frames(self) -> int:
        return self.masks.shape[1]


def clip_targets(clip: list[SyntheticScene], stride: int, max_tracks: int = MAX_TRACKS) -> ClipTargets:
    """Identities visible in the first frame (at most ``max_tracks``) and their per-frame masks."""
    first = clip[0].instances[:max_tracks]
    h, w = clip[0].image.shape[0] // stride, clip[0].image.shape[1] // stride
    masks = np.zeros((len(first), len(clip), h, w))
    for t, frame in enumerate(clip):
        for o, inst0 in enumerate(first):
            inst = frame.instance(inst0.identity)
            if inst is not None:
                masks[o, t] = rasterize(inst.mask, stride)
    return ClipTargets([i.identity for i in first], [i.concept_id for i in first], masks)


def clip_features(model: StudentModel, clip: list[SyntheticScene]) -> Tensor:
    return student_features(model, Tensor(np.stack([f.image for f in clip])))


def stage2_step(
    clip: list[SyntheticScene],
    model: StudentModel,
    teacher,
    w: LossWeights,
    rng: np.random.Generator | None = None,
    readout_weight: float = 0.0,
    feats: Tensor | None = None,
    targets: ClipTargets | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Mean over decode steps and objects of mask terms plus track-score BCE.

    At every step t the bank is updated with the teacher mask of frame t and
    frame t+1 is decoded from the compressed memory. ``rng`` drives Perceiver
    dropout (None disables it). With ``readout_weight`` > 0 the compressed
    readout is also pulled towards the readout from every raw bank token.
    """
    if len(clip) < 2:
        raise ValueError("stage2_step needs a clip with at least 2 frames")
    cfg = model.config
    if targets is None:
        targets = clip_targets(clip, cfg.stride)
    if not targets.identities:
        raise ValueError("stage2_step: no tracked objects in the first frame")
    if feats is None:
        feats = clip_features(model, clip)
    per = model["perceiver"]

    mask_l, score_l, read_l = [], [], []
    for o, (oid, cid) in enumerate(zip(targets.identities, targets.concepts)):
        bank = MemoryBank(cfg.bank_capacity, oid)
        for t in range(len(clip) - 1):
            bank = bank_update(bank, memory_encode(per, feats[t], targets.masks[o, t], t, oid))
            mem = memory_tokens(model, bank, compressed=True, rng=rng)
            logits, score = track_decode(model, feats[t + 1], cid, mem)
            target = targets.masks[o, t + 1]
            mask_l.append(mask_terms(logits, target, w))
            score_l.append(score_bce(score, np.array([teacher.track_score(target)])))
            if readout_weight > 0.0:
                with no_record():
                    ref, _ = track_decode(model, feats[t + 1], cid, memory_tokens(model, bank, compressed=False))
                read_l.append(feature_mse(logits, ref.data))
    n = len(mask_l)
    mask = T.add_n(mask_l) * (1.0 / n)
    score = T.add_n(score_l) * (1.0 / n)
    total = mask + score
    feat = 0.0
    if read_l:
        feat_t = T.add_n(read_l) * (1.0 / n)
        total = total + feat_t * readout_weight
        feat = feat_t.item()
    return total, {"total": total.item(), "mask": mask.item(), "score": score.item(), "feat": feat}


def track_clip(
    model: StudentModel,
    clip: list[SyntheticScene],
    use_memory: bool = True,
    compressed: bool = True,
    targets: ClipTargets | None = None,
) -> np.ndarray:
    """Semi-supervised propagation from first-frame masks; returns (n_objects, T, h, w) binary masks.

    Frame 0 is the given mask. Later frames are decoded from memory filled with
    the model's own previous predictions, or from the no-memory token.
    """
    cfg = model.config
    targets = targets if targets is not None else clip_targets(clip, cfg.stride)
    out = np.zeros_like(targets.masks)
    with no_record():
        feats = clip_features(model, clip)
        for o, (oid, cid) in enumerate(zip(targets.identities, targets.concepts)):
            out[o, 0] = targets.masks[o, 0]
            bank = MemoryBank(cfg.bank_capacity, oid)
            for t in range(len(clip) - 1):
                mem = None
                if use_memory:
                    bank = bank_update(bank, memory_encode(model["perceiver"], feats[t], out[o, t], t, oid))
                    mem = memory_tokens(model, bank, compressed=compressed)
                logits, score = track_decode(model, feats[t + 1], cid, mem)
                out[o, t + 1] = ((logits.data >= 0.0) & (score.data[0] >= 0.0)).astype(np.float64)
    return out
