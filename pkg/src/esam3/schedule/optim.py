"""Learning-rate schedule, AdamW with decoupled decay, gradient clipping and EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numerics.tensor import NumericalError, Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def warmup_cosine(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns (grads, norm before)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    *,
    lr: float,
    groups: dict[str, str],
    weight_decay: dict[str, float],
    clip_norm: float | None = None,
    betas: tuple[float, float] = (BETA1, BETA2),
    eps: float = ADAM_EPS,
) -> tuple[dict[str, np.ndarray], AdamState, float]:
    """One AdamW update over the parameters that have gradients.

    Parameters without a gradient are left untouched. Returns
    (new params, new state, gradient norm before clipping).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    grads, norm = clip_by_global_norm(grads, clip_norm)
    b1, b2 = betas
    t = state.step + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params = dict(params)
    m_all, v_all = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        wd = weight_decay[groups[name]]
        m = b1 * m_all.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * v_all.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        p = p * (1.0 - lr * wd)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = p
        m_all[name], v_all[name] = m, v
    return new_params, AdamState(t, m_all, v_all), norm


class AdamW:
    """Stateful wrapper over :func:`optimizer_step` acting on Tensors in place."""

    def __init__(
        self,
        groups: dict[str, list[Tensor]],
        weight_decay: dict[str, float],
        clip_norm: float | None = None,
    ) -> None:
        self.params: dict[str, Tensor] = {}
        self.tags: dict[str, str] = {}
        for tag, tensors in groups.items():
            for i, t in enumerate(tensors):
                key = t.name or f"{tag}.{i}"
                self.params[key] = t
                self.tags[key] = tag
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = AdamState()
        self.last_grad_norm = 0.0

    def step(self, lr: float) -> None:
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        values = {k: self.params[k].data for k in grads}
        new, self.state, self.last_grad_norm = optimizer_step(
            values, grads, self.state, lr=lr, groups=self.tags, weight_decay=self.weight_decay, clip_norm=self.clip_norm
        )
        for k in grads:
            self.params[k].data = new[k]
            self.params[k].grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, m in self.state.m.items():
            out[f"m.{k}"] = m
            out[f"v.{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, step: int, arrays: dict[str, np.ndarray]) -> None:
        m = {k[2:]: a for k, a in arrays.items() if k.startswith("m.")}
        v = {k[2:]: a for k, a in arrays.items() if k.startswith("v.")}
        self.state = AdamState(step, m, v)


def ema_update(model_params: dict[str, np.ndarray], ema_params: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    """ema <- decay * ema + (1 - decay) * model, per parameter."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    out = {}
    for k, ema in ema_params.items():
        p = model_params[k]
        if p.shape != ema.shape:
            raise ValueError(f"EMA shape mismatch for {k}: {p.shape} vs {ema.shape}")
        out[k] = decay * ema + (1.0 - decay) * p
    return out
