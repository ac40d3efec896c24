"""Readout attention cost: analytic multiply-accumulate counts and a wall-clock microbenchmark."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = ("n_tokens", "k", "c", "d_k", "flops_dense", "flops_compressed", "wall_us_dense", "wall_us_compressed")
DEFAULT_QUERIES = 64  # one 8x8 frame of pixel queries


@dataclass(frozen=True)
class AttentionCost:
    dense: int
    compressed: int

    @property
    def ratio(self) -> float:
        return self.dense / self.compressed


def attention_cost(n_tokens: int, k: int, c: int, d_k: int, n_queries: int = DEFAULT_QUERIES) -> AttentionCost:
    """MACs of the score matrix (q.k over d_k) plus the weighted value sum (over c).

    Dense readout attends to every memory token, compressed readout to the K latents.
    """
    for name, v in (("n_tokens", n_tokens), ("k", k), ("c", c), ("d_k", d_k), ("n_queries", n_queries)):
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ValueError(f"{name} must be a positive int, got {v!r}")
    per_key = n_queries * (d_k + c)
    return AttentionCost(n_tokens * per_key, k * per_key)


def _readout(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    s = q @ keys.T
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s @ values


def _time_us(fn, repeats: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append((time.perf_counter_ns() - t0) / 1e3)
    return float(statistics.median(times))


def benchmark(
    n_tokens: int,
    k: int,
    c: int = 64,
    d_k: int = 64,
    repeats: int = 20,
    n_queries: int = DEFAULT_QUERIES,
    seed: int = 0,
) -> dict:
    """One CSV row: analytic counts plus median wall-clock microseconds of each readout."""
    if repeats < 1:
        raise ValueError("repeats must be positive")
    cost = attention_cost(n_tokens, k, c, d_k, n_queries)
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n_queries, d_k))
    dense_k, dense_v = rng.standard_normal((n_tokens, d_k)), rng.standard_normal((n_tokens, c))
    lat_k, lat_v = rng.standard_normal((k, d_k)), rng.standard_normal((k, c))
    return {
        "n_tokens": n_tokens,
        "k": k,
        "c": c,
        "d_k": d_k,
        "flops_dense": cost.dense,
        "flops_compressed": cost.compressed,
        "wall_us_dense": _time_us(lambda: _readout(q, dense_k, dense_v), repeats),
        "wall_us_compressed": _time_us(lambda: _readout(q, lat_k, lat_v), repeats),
    }


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r[c] for c in CSV_COLUMNS})
