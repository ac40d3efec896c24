"""Detect / propagate / merge loop over video frames."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import SCORE_THRESHOLD, Detection, detect
from .metrics import iou

DEFAULT_TTL = 3
IOU_THRESHOLD = 0.5


@dataclass
class Masklet:
    identity: int
    concept_id: int
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # frame -> (h, w) mask
    alive: bool = True
    ttl: int = DEFAULT_TTL

    def set_mask(self, frame: int, mask: np.ndarray) -> None:
        if self.masks and frame < max(self.masks):
            raise ValueError(f"masklet {self.identity}: frame {frame} precedes frame {max(self.masks)}")
        self.masks[frame] = np.asarray(mask, dtype=np.float64)

    def last_mask(self) -> np.ndarray | None:
        return self.masks[max(self.masks)] if self.masks else None


def merge(
    propagated: list[Masklet],
    detections: list[Detection],
    frame: int,
    iou_threshold: float = IOU_THRESHOLD,
    spawn_threshold: float = SCORE_THRESHOLD,
    ttl: int = DEFAULT_TTL,
    next_identity: int | None = None,
) -> list[Masklet]:
    """Greedy merge of detections into masklets holding their propagated mask for ``frame``.

    Detections are visited in descending score; each takes the unclaimed live
    masklet with the highest IoU at or above ``iou_threshold`` and refreshes
    its mask. Leftover detections scoring at least ``spawn_threshold`` start
    new identities. Leftover masklets keep the propagated mask and lose one
    unit of time-to-live, dying when it reaches zero.
    """
    live = [m for m in propagated if m.alive]
    claimed: set[int] = set()
    if next_identity is None:
        next_identity = max((m.identity for m in propagated), default=-1) + 1
    spawned = []
    for det in sorted(detections, key=lambda d: -d.score):
        best, best_iou = None, iou_threshold
        for k, m in enumerate(live):
            if k in claimed or frame not in m.masks:
                continue
            v = iou(det.mask, m.masks[frame])
            if v >= best_iou:
                best, best_iou = k, v
        if best is not None:
            claimed.add(best)
            live[best].masks[frame] = det.mask.copy()
            live[best].ttl = ttl
        elif det.score >= spawn_threshold:
            spawned.append(Masklet(next_identity, det.concept_id, {frame: det.mask.copy()}, True, ttl))
            next_identity += 1
    for k, m in enumerate(live):
        if k not in claimed:
            m.ttl -= 1
            if m.ttl <= 0:
                m.alive = False
    return propagated + spawned


def run_video(frames_feat, concept_id: int, detector_for_frame, propagate, score_threshold: float = SCORE_THRESHOLD):
    """Concept tracking over a clip.

    ``detector_for_frame(t)`` returns the detector callable for frame t;
    ``propagate(masklet, t)`` returns the masklet's propagated mask at frame t.
    """
    masklets: list[Masklet] = []
    for t, feat in enumerate(frames_feat):
        for m in masklets:
            if m.alive:
                m.set_mask(t, propagate(m, t))
        _, dets = detect(feat, concept_id, detector_for_frame(t), score_threshold=None)
        masklets = merge(masklets, dets, t, spawn_threshold=score_threshold)
    return masklets
