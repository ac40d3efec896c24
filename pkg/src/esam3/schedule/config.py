"""Stage configuration, presets and the per-stage freezing policy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..losses import LossWeights
from .optim import warmup_cosine

STAGES = (1, 2, 3)
DEFAULT_SEED = 42
WD_ENCODER = 0.05
WD_OTHER = 0.01


class ConfigError(ValueError):
    pass


def freezing_policy(stage: int, unfreeze_encoder: bool = False) -> set[str]:
    """Trainable parameter groups for ``stage``; the teacher is never trainable."""
    if stage == 1:
        groups = {"encoder", "projection", "decoder"}
    elif stage == 2:
        groups = {"perceiver", "tracking_head"}
    elif stage == 3:
        groups = {"perceiver", "decoder", "presence_head", "concept_embedding"}
    else:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if unfreeze_encoder:
        groups.add("encoder")
    return groups


def default_warmup(total_steps: int) -> int:
    return min(1000, total_steps // 10)


@dataclass
class StageConfig:
    stage: int
    base_lr: float
    total_steps: int
    batch_size: int
    warmup_steps: int | None = None  # None -> min(1000, 10% of total_steps)
    weight_decay_encoder: float = WD_ENCODER
    weight_decay_other: float = WD_OTHER
    loss_weights: LossWeights = field(default_factory=LossWeights)
    trainable_modules: frozenset[str] | None = None  # None -> freezing_policy
    unfreeze_encoder: bool = False
    clip_norm: float | None = 1.0
    ema_decay: float | None = None
    seed: int = DEFAULT_SEED
    refinement_loops: int = 1
    readout_weight: float = 0.0
    clips_per_batch: int = 0  # stage 3 only: clips mixed into each batch
    negatives_per_image: int = 1
    exemplar_prob: float = 0.5
    checkpoint_every: int = 0  # 0 -> final checkpoint only

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ConfigError("total_steps must be >= 0 and batch_size >= 1")
        if self.warmup_steps is None:
            self.warmup_steps = default_warmup(self.total_steps)
        if self.warmup_steps < 0 or (self.total_steps > 0 and self.warmup_steps >= self.total_steps):
            raise ConfigError(f"warmup_steps {self.warmup_steps} must be below total_steps {self.total_steps}")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.trainable_modules is not None:
            self.trainable_modules = frozenset(self.trainable_modules)

    @property
    def trainable(self) -> set[str]:
        if self.trainable_modules is not None:
            return set(self.trainable_modules)
        return freezing_policy(self.stage, self.unfreeze_encoder)

    @property
    def weight_decay(self) -> dict[str, float]:
        return {"encoder": self.weight_decay_encoder, "other": self.weight_decay_other}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_modules"] = sorted(self.trainable_modules) if self.trainable_modules is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        if not isinstance(d, dict):
            raise ConfigError("stage config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if isinstance(kw.get("loss_weights"), dict):
            lw_known = set(LossWeights.__dataclass_fields__)
            bad = set(kw["loss_weights"]) - lw_known
            if bad:
                raise ConfigError(f"unknown loss weight keys: {sorted(bad)}")
            kw["loss_weights"] = LossWeights(**kw["loss_weights"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "StageConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "StageConfig":
        if "total_steps" in kw and "warmup_steps" not in kw:
            kw["warmup_steps"] = None
        return replace(self, **kw)


def lr_at(step: int, cfg: StageConfig) -> float:
    return warmup_cosine(step, cfg.base_lr, cfg.warmup_steps, cfg.total_steps)


# Published recipe: batch sizes and learning rates as reported for full-scale training.
PUBLISHED_PRESETS = {
    1: StageConfig(stage=1, base_lr=1e-4, total_steps=10_000, batch_size=64, warmup_steps=1000, clip_norm=None),
    2: StageConfig(stage=2, base_lr=5e-5, total_steps=10_000, batch_size=16, clip_norm=None),
    3: StageConfig(stage=3, base_lr=2e-5, total_steps=10_000, batch_size=32, clips_per_batch=8, ema_decay=0.999, clip_norm=None),
}

# Desk scale: randomly initialised toy students need larger steps and smaller batches.
DESK_PRESETS = {
    1: StageConfig(stage=1, base_lr=3e-3, total_steps=2000, batch_size=4),
    2: StageConfig(stage=2, base_lr=3e-3, total_steps=1000, batch_size=2),
    3: StageConfig(stage=3, base_lr=1e-3, total_steps=400, batch_size=4, clips_per_batch=1, ema_decay=0.99),
}


def preset(stage: int, name: str = "desk") -> StageConfig:
    table = {"desk": DESK_PRESETS, "published": PUBLISHED_PRESETS}.get(name)
    if table is None:
        raise ConfigError(f"unknown preset {name!r}")
    if stage not in table:
        raise ConfigError(f"unknown stage {stage!r}")
    return replace(table[stage])
