"""Prompt-in-the-loop encoder distillation step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..losses import LossWeights, feature_mse, mask_terms, total_loss
from ..matching import mask_cost, match
from ..model import StudentModel, student_features
from ..numerics import tensor as T
from ..numerics.tensor import Tensor
from ..pcs_sim.scenes import SyntheticScene, rasterize
from .decoder import decode_prompt, image_tokens
from .prompts import Converged, PromptSet, corrective_point, disagreement, initial_prompt
from .teacher import Teacher

MAX_INSTANCES = 16


@dataclass
class DistillInstance:
    gt_mask: np.ndarray  # (h, w) binary
    teacher_mask: np.ndarray  # (h, w) binary
    teacher_feat_key: str
    prompt_set: PromptSet


@dataclass
class DistillImage:
    image: np.ndarray  # (H, W, 3)
    teacher_feat: np.ndarray  # (h, w, C)
    instances: list[DistillInstance]


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def build_batch(
    scenes: list[SyntheticScene],
    teacher: Teacher,
    rng: np.random.Generator,
    max_instances: int = MAX_INSTANCES,
) -> list[DistillImage]:
    """Sample one initial prompt per instance (at most ``max_instances`` per image)."""
    stride = teacher.model_config.stride
    out = []
    for scene in scenes:
        feats = teacher.scene_features(scene)
        key = teacher.feature_key(scene)
        idx = list(range(len(scene.instances)))
        if len(idx) > max_instances:
            idx = sorted(rng.choice(idx, size=max_instances, replace=False).tolist())
        items = []
        for i in idx:
            inst = scene.instances[i]
            ps = PromptSet([initial_prompt(inst.mask, rng)], inst.concept_id)
            gt = rasterize(inst.mask, stride)
            tm = teacher.mask(scene, i, ps, feats)
            items.append(DistillInstance(gt, tm, key, ps))
        out.append(DistillImage(scene.image, feats, items))
    return out


def stage1_step(
    batch: list[DistillImage],
    model: StudentModel,
    teacher: Teacher,
    w: LossWeights,
    refinement_loops: int = 1,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Loss for one batch: feature MSE once per image, then per instance the
    task and matched mask-distillation terms of the initial decode and of every
    refinement round that still has a teacher/student disagreement.

    Refinement appends one corrective click per instance per round. Returns
    (total, breakdown) with the mask/task terms averaged over instances.
    """
    if not batch or not any(item.instances for item in batch):
        raise ValueError("stage1_step: empty batch")
    if refinement_loops < 0:
        raise ValueError("refinement_loops must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = model.config
    dec = model["decoder"]
    table = model["concept_embedding"]["table"]
    feats = student_features(model, Tensor(np.stack([item.image for item in batch])))

    feat_terms, task_terms, mask_terms_ = [], [], []
    n_inst = 0
    for b, item in enumerate(batch):
        fb = feats[b]
        feat_terms.append(feature_mse(fb, item.teacher_feat))
        if not item.instances:
            continue
        n_inst += len(item.instances)
        x = image_tokens(dec, fb, model.pos)
        prompt_sets = [inst.prompt_set for inst in item.instances]
        teacher_masks = [inst.teacher_mask for inst in item.instances]
        active = list(range(len(item.instances)))
        for r in range(refinement_loops + 1):
            logits = {
                i: decode_prompt(dec, table, x, prompt_sets[i], size=cfg.feature_size, image_size=cfg.image_size)
                for i in active
            }
            probs = {i: sigmoid_np(logits[i].data) for i in active}
            sigma = match(mask_cost([probs[i] for i in active], teacher_masks, w))
            for k, i in enumerate(active):
                target = teacher_masks[sigma[k]] if sigma[k] >= 0 else np.zeros_like(teacher_masks[0])
                mask_terms_.append(mask_terms(logits[i], target, w))
                task_terms.append(mask_terms(logits[i], item.instances[i].gt_mask, w))
            if r == refinement_loops:
                break
            still = []
            for i in active:
                fn, fp = disagreement(probs[i], teacher_masks[i])
                try:
                    click = corrective_point(fn, fp, rng, stride=cfg.stride)
                except Converged:
                    continue
                prompt_sets[i] = prompt_sets[i].append(click)
                if teacher.config.mode == "trained":
                    teacher_masks[i] = teacher.decode(item.teacher_feat, prompt_sets[i])
                still.append(i)
            active = still
            if not active:
                break

    feat = T.add_n(feat_terms) * (1.0 / len(feat_terms))
    task = T.add_n(task_terms) * (1.0 / n_inst)
    mask = T.add_n(mask_terms_) * (1.0 / n_inst)
    total = total_loss(task, feat, mask, w)
    return total, {"total": total.item(), "feat": feat.item(), "task": task.item(), "mask": mask.item()}
