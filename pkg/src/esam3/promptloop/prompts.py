"""Geometric prompts: initial sampling and disagreement-driven corrective clicks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import ndimage

PromptKind = Literal["positive_point", "negative_point", "box"]


class Converged(Exception):
    """No disagreement left between student and teacher; refinement is skipped."""


@dataclass(frozen=True)
class Prompt:
    kind: PromptKind
    coords: tuple[float, ...]  # (x, y) or (x1, y1, x2, y2), pixel units
    order_index: int = 0

    def __post_init__(self) -> None:
        if self.kind == "box":
            if len(self.coords) != 4:
                raise ValueError("box prompt needs (x1, y1, x2, y2)")
            x1, y1, x2, y2 = self.coords
            if not (x1 < x2 and y1 < y2):
                raise ValueError(f"degenerate box {self.coords}")
        elif self.kind in ("positive_point", "negative_point"):
            if len(self.coords) != 2:
                raise ValueError("point prompt needs (x, y)")
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")

    def in_bounds(self, width: int, height: int) -> bool:
        xs = self.coords[0::2]
        ys = self.coords[1::2]
        return all(0 <= x < width for x in xs) and all(0 <= y < height for y in ys)


@dataclass
class PromptSet:
    prompts: list[Prompt] = field(default_factory=list)
    concept_id: int = 0

    def append(self, p: Prompt) -> "PromptSet":
        return PromptSet(self.prompts + [Prompt(p.kind, p.coords, len(self.prompts))], self.concept_id)

    def __len__(self) -> int:
        return len(self.prompts)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask.astype(bool)
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def center_point(mask: np.ndarray) -> tuple[int, int]:
    """(x, y) of the component pixel nearest the centroid of the largest component.

    Row-major order breaks distance ties, so a centroid that falls in a hole
    resolves to a deterministic interior pixel.
    """
    comp = _largest_component(np.asarray(mask, bool))
    rows, cols = np.nonzero(comp)
    cy, cx = rows.mean(), cols.mean()
    d2 = (rows - cy) ** 2 + (cols - cx) ** 2
    k = int(np.argmin(d2))
    return int(cols[k]), int(rows[k])


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.nonzero(np.any(mask, axis=1))[0]
    cols = np.nonzero(np.any(mask, axis=0))[0]
    x1, x2, y1, y2 = int(cols[0]), int(cols[-1]), int(rows[0]), int(rows[-1])
    if x1 == x2 or y1 == y2:
        return None
    return x1, y1, x2, y2


def initial_prompt(mask: np.ndarray, rng: np.random.Generator) -> Prompt:
    """Tight box or centre point with equal probability; degenerate boxes fall back to the point."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("initial_prompt: empty mask")
    want_box = rng.random() < 0.5
    if want_box:
        box = tight_box(mask)
        if box is not None:
            return Prompt("box", box)
    return Prompt("positive_point", center_point(mask))


def disagreement(student_mask, teacher_mask, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """(false negatives, false positives) of the thresholded student against the teacher."""
    s = np.asarray(student_mask) >= threshold
    t = np.asarray(teacher_mask) > 0.5
    return t & ~s, ~t & s


def interior_most(region: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    """(row, col) of the region pixel farthest from the region boundary; the image border counts as boundary."""
    padded = np.pad(region, 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    dist = np.where(region, dist, -1.0)
    best = np.argwhere(dist == dist.max())
    r, c = best[int(rng.integers(len(best)))] if len(best) > 1 else best[0]
    return int(r), int(c)


def corrective_point(fn_region, fp_region, rng: np.random.Generator, stride: int = 1) -> Prompt:
    """Click inside the larger error region (FN wins ties): positive on FN, negative on FP.

    Region cells map to pixel coordinates at the cell centre when ``stride`` > 1.
    """
    fn = np.asarray(fn_region, bool)
    fp = np.asarray(fp_region, bool)
    n_fn, n_fp = int(fn.sum()), int(fp.sum())
    if n_fn == 0 and n_fp == 0:
        raise Converged()
    region, kind = (fn, "positive_point") if n_fn >= n_fp else (fp, "negative_point")
    r, c = interior_most(region, rng)
    offset = stride // 2 if stride > 1 else 0
    return Prompt(kind, (c * stride + offset, r * stride + offset))
