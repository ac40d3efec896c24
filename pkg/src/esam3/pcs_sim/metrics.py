"""Image mIoU and video J&F."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..matching import hungarian

BOUNDARY_TOLERANCE = 1


def iou(pred, gt) -> float:
    """|pred & gt| / |pred | gt|; two empty masks count as a perfect match."""
    p = np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def scene_miou(preds, gts) -> float:
    """Mean IoU over the instances of one scene; ``preds``/``gts`` are (n, h, w) or (h, w)."""
    p = np.asarray(preds)
    g = np.asarray(gts)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    if g.ndim == 2:
        return iou(p, g)
    if len(g) == 0:
        raise ValueError("scene without ground-truth instances")
    return float(np.mean([iou(a, b) for a, b in zip(p, g)]))


def eval_miou(preds, gts, per_scene: bool = False):
    """Mean of per-scene mIoU values."""
    if len(gts) == 0:
        raise ValueError("eval_miou: no ground truth")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} scenes")
    vals = [scene_miou(p, g) for p, g in zip(preds, gts)]
    mean = float(np.mean(vals))
    return (mean, vals) if per_scene else mean


def boundary(mask) -> np.ndarray:
    """One-pixel inner boundary: the mask minus its erosion."""
    m = np.asarray(mask) > 0.5
    return m & ~ndimage.binary_erosion(m, border_value=0)


def boundary_f(pred, gt, tolerance: int = BOUNDARY_TOLERANCE) -> float:
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = bp.sum(), bg.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    struct = ndimage.generate_binary_structure(2, 2)
    gt_zone = ndimage.binary_dilation(bg, struct, iterations=tolerance)
    pred_zone = ndimage.binary_dilation(bp, struct, iterations=tolerance)
    precision = (bp & gt_zone).sum() / n_p
    recall = (bg & pred_zone).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def _first_frame_matching(pred: np.ndarray, gt: np.ndarray) -> list[int]:
    """Prediction index for each ground-truth object (-1 when none), maximizing first-frame IoU."""
    n_g, n_p = len(gt), len(pred)
    if n_p == 0:
        return [-1] * n_g
    first = [int(np.argmax([m.any() for m in g])) for g in gt]
    cost = np.array([[1.0 - iou(pred[j, first[i]], gt[i, first[i]]) for j in range(n_p)] for i in range(n_g)])
    if n_g <= n_p:
        return [int(c) for c in hungarian(cost)]
    cols = hungarian(cost.T)
    out = [-1] * n_g
    for j, i in enumerate(cols):
        out[int(i)] = j
    return out


def eval_jf(pred_masklets, gt_masklets, frames: slice | None = None) -> tuple[float, float, float]:
    """(J, F, J&F) averaged over frames and ground-truth objects.

    Inputs are (n_objects, T, h, w). Predicted objects are matched to ground
    truth by first-frame IoU; unmatched ground truth is scored against an
    empty prediction. ``frames`` restricts scoring (e.g. skip the given frame).
    """
    gt = np.asarray(gt_masklets, dtype=np.float64)
    pred = np.asarray(pred_masklets, dtype=np.float64)
    if gt.ndim != 4 or len(gt) == 0:
        raise ValueError("eval_jf: no ground truth")
    if pred.size and pred.shape[1:] != gt.shape[1:]:
        raise ValueError(f"prediction shape {pred.shape} incompatible with ground truth {gt.shape}")
    sel = frames if frames is not None else slice(None)
    js, fs = [], []
    for i, j in enumerate(_first_frame_matching(pred, gt)):
        p = pred[j] if j >= 0 else np.zeros_like(gt[i])
        for pm, gm in zip(p[sel], gt[i][sel]):
            js.append(iou(pm, gm))
            fs.append(boundary_f(pm, gm))
    J, F = float(np.mean(js)), float(np.mean(fs))
    return J, F, (J + F) / 2.0
