"""Prediction helpers and metric reports shared by the CLI and the acceptance checks."""

from __future__ import annotations

import numpy as np

from .memory.stage2 import clip_targets, track_clip
from .model import StudentModel, student_features
from .numerics.tensor import Tensor, no_record
from .pcs_sim.metrics import eval_jf, eval_miou, scene_miou
from .pcs_sim.scenes import SyntheticScene, feature_masks
from .promptloop.decoder import decode_prompt, image_tokens
from .promptloop.prompts import PromptSet, initial_prompt

ORACLE = "oracle"
EMPTY = "empty"


def with_ema(model: StudentModel, ema: dict[str, np.ndarray] | None) -> StudentModel:
    if not ema:
        return model
    out = model.copy()
    for name, t in out.named_parameters():
        t.data = ema[name].copy()
    return out


def predict_scene(model: StudentModel, scene: SyntheticScene, rng: np.random.Generator) -> np.ndarray:
    """(n, h, w) binary masks, one initial geometric prompt per instance."""
    cfg = model.config
    with no_record():
        feats = student_features(model, Tensor(scene.image[None]))[0]
        x = image_tokens(model["decoder"], feats, model.pos)
        table = model["concept_embedding"]["table"]
        out = []
        for inst in scene.instances:
            ps = PromptSet([initial_prompt(inst.mask, rng)], inst.concept_id)
            logits = decode_prompt(model["decoder"], table, x, ps, size=cfg.feature_size, image_size=cfg.image_size)
            out.append((logits.data >= 0.0).astype(np.float64))
    return np.stack(out)


def miou_report(predictor, scenes: list[SyntheticScene], stride: int, seed: int = 0) -> dict:
    """``predictor`` is a model, ``"oracle"`` (ground truth) or ``"empty"`` (all-zero masks)."""
    rng = np.random.default_rng(seed)
    gts = [feature_masks(s, stride) for s in scenes]
    if predictor == ORACLE:
        preds = gts
    elif predictor == EMPTY:
        preds = [np.zeros_like(g) for g in gts]
    else:
        preds = [predict_scene(predictor, s, rng) for s in scenes]
    agg, per = eval_miou(preds, gts, per_scene=True)
    return {
        "metric": "miou",
        "aggregate": agg,
        "per_scene": [{"id": s.scene_id, "miou": v} for s, v in zip(scenes, per)],
    }


def jf_report(predictor, clips: list[list[SyntheticScene]], stride: int, use_memory: bool = True) -> dict:
    """J&F over the frames after the prompted first frame."""
    if not clips:
        raise ValueError("J&F needs video clips; the dataset has none")
    per = []
    for clip in clips:
        tg = clip_targets(clip, stride)
        if predictor == ORACLE:
            pred = tg.masks
        elif predictor == EMPTY:
            pred = np.zeros_like(tg.masks)
        else:
            pred = track_clip(predictor, clip, use_memory=use_memory, targets=tg)
        j, f, jf = eval_jf(pred, tg.masks, slice(1, None))
        per.append({"id": clip[0].scene_id, "j": j, "f": f, "jf": jf})
    agg = {k: float(np.mean([p[k] for p in per])) for k in ("j", "f", "jf")}
    return {"metric": "jf", "aggregate": agg, "per_scene": per}


__all__ = ["predict_scene", "miou_report", "jf_report", "with_ema", "scene_miou", "ORACLE", "EMPTY"]
