"""Bipartite matching between student and teacher mask sets."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .losses import LossWeights, dice_loss, focal_loss
from .numerics.tensor import ShapeError, Tensor

MAX_BRUTE_FORCE = 8
_PROB_CLIP = 1e-12


def _tie_tol(total: float) -> float:
    return 1e-9 * max(1.0, abs(total))


def _as_cost(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError(f"cost matrix must be a non-empty 2-D array, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    if np.any(c < 0):
        raise ValueError("cost matrix entries must be non-negative")
    return c


def mask_cost(student_masks, teacher_masks, w: LossWeights | None = None) -> np.ndarray:
    """cost[i, j] = Dice(s_i, t_j) + Focal(logit(s_i), t_j) for probability masks s_i."""
    w = w or LossWeights()
    if not student_masks or not teacher_masks:
        raise ValueError("mask_cost needs non-empty student and teacher lists")
    s_arr = [np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64) for s in student_masks]
    t_arr = [np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in teacher_masks]
    shape = s_arr[0].shape
    for m in s_arr + t_arr:
        if m.shape != shape:
            raise ShapeError("mask_cost", shape, m.shape)
    cost = np.empty((len(s_arr), len(t_arr)))
    for i, s in enumerate(s_arr):
        p = np.clip(s, _PROB_CLIP, 1.0 - _PROB_CLIP)
        logit = np.log(p) - np.log1p(-p)
        for j, t in enumerate(t_arr):
            d = dice_loss(Tensor(s), Tensor(t), w.dice_eps).item()
            f = focal_loss(Tensor(logit), Tensor(t), w.focal_alpha, w.focal_gamma).item()
            cost[i, j] = max(d, 0.0) + f
    return cost


def _solve(c: np.ndarray) -> tuple[list[int], list[float], list[float]]:
    """Shortest-augmenting-path Hungarian for n <= m; returns (cols, u, v) with 1-based duals."""
    n, m = c.shape
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    rows = c.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols, u, v


def _row_total(c: np.ndarray, cols) -> float:
    total = 0.0
    for i, j in enumerate(cols):
        total += float(c[i, j])
    return total


def hungarian(cost) -> np.ndarray:
    """Minimum-cost injective assignment rows -> cols (requires rows <= cols).

    Among optimal assignments the lexicographically smallest column vector is
    returned: rows are fixed one at a time, trying only columns whose reduced
    cost is tight under the optimal duals of the remaining subproblem.
    """
    c = _as_cost(cost)
    n, m = c.shape
    if n > m:
        raise ValueError(f"hungarian needs rows <= cols, got {c.shape}; pad first")
    free = list(range(m))
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        sub = c[i:, :][:, free]
        cols, u, v = _solve(sub)
        best = _row_total(sub, cols)
        tol = _tie_tol(best)
        chosen = free[cols[0]]
        for jj, j in enumerate(free):
            if j >= chosen:
                break
            if sub[0, jj] - u[1] - v[jj + 1] > tol:
                continue
            rest = np.delete(sub[1:], jj, axis=1)
            alt = sub[0, jj]
            if rest.shape[0]:
                rc, _, _ = _solve(rest)
                alt += _row_total(rest, rc)
            if alt <= best + tol:
                chosen = j
                break
        out[i] = chosen
        free.remove(chosen)
    return out


def brute_force_match(cost) -> np.ndarray:
    """Exhaustive search over permutations (square, n <= 8), same tie rule as hungarian."""
    c = _as_cost(cost)
    n, m = c.shape
    if n != m:
        raise ValueError(f"brute_force_match needs a square matrix, got {c.shape}")
    if n > MAX_BRUTE_FORCE:
        raise ValueError(f"brute_force_match supports n <= {MAX_BRUTE_FORCE}, got {n}")
    perms = list(itertools.permutations(range(n)))
    totals = [_row_total(c, p) for p in perms]
    best = min(totals)
    tol = _tie_tol(best)
    for p, t in zip(perms, totals):  # permutations() yields lexicographic order
        if t <= best + tol:
            return np.array(p, dtype=np.int64)
    raise AssertionError("unreachable")


def assignment_cost(cost, assignment) -> float:
    return _row_total(np.asarray(cost, dtype=np.float64), assignment)


def pad_square(cost) -> np.ndarray:
    """Pad a rectangular cost matrix to square with 10x its max entry."""
    c = _as_cost(cost)
    n, m = c.shape
    size = max(n, m)
    fill = 10.0 * float(c.max()) if c.max() > 0 else 1.0
    out = np.full((size, size), fill)
    out[:n, :m] = c
    return out


def match(cost) -> np.ndarray:
    """Student -> teacher index for every row; -1 marks a virtual empty teacher mask."""
    c = _as_cost(cost)
    n, m = c.shape
    sigma = hungarian(pad_square(c) if n != m else c)
    return np.where(sigma < m, sigma, -1)[:n]
