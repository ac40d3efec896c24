"""Stage driver: data, step function, optimizer, EMA, logs and checkpoints."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import GROUPS, ModelConfig, StudentModel, init_student
from ..numerics import tensor as T
from ..numerics.tensor import Record, backward, no_record
from ..pcs_sim.scenes import SceneConfig, gen_clip, gen_scene
from ..promptloop.teacher import Teacher, TeacherConfig
from ..rng import substream
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import StageConfig, lr_at
from .optim import AdamW, ema_update

LOG_FIELDS = ("stage", "step", "lr", "loss_total", "loss_feat", "loss_mask", "loss_task", "loss_score", "wall_ms")


class MissingCheckpointError(CheckpointError):
    pass


class ProceduralSource:
    """Fresh scenes and clips per step, seeded from (seed, step)."""

    def __init__(self, scene_config: SceneConfig | None = None, seed: int = 42) -> None:
        self.scene_config = scene_config or SceneConfig()
        self.seed = seed

    def _seeds(self, kind: str, step: int, n: int) -> list[int]:
        return [int(s) for s in substream(self.seed, f"train-{kind}", step).integers(0, 2**31 - 1, n)]

    def scenes(self, step: int, n: int):
        return [gen_scene(self.scene_config, s) for s in self._seeds("scenes", step, n)]

    def clips(self, step: int, n: int):
        return [gen_clip(self.scene_config, s) for s in self._seeds("clips", step, n)]


class DatasetSource:
    """Cycles through a generated dataset in a fixed order."""

    def __init__(self, dataset) -> None:
        self.dataset = dataset
        self.scene_config = dataset.scene_config

    @staticmethod
    def _cycle(items, step: int, n: int, what: str):
        if not items:
            raise ValueError(f"dataset has no {what}")
        return [items[(step * n + i) % len(items)] for i in range(n)]

    def scenes(self, step: int, n: int):
        return self._cycle(self.dataset.scenes, step, n, "scenes")

    def clips(self, step: int, n: int):
        return self._cycle(self.dataset.clips, step, n, "clips")


@dataclass
class RunResult:
    model: StudentModel
    ema: dict[str, np.ndarray] | None
    records: list[dict]
    checkpoint: Path | None
    frozen_hash: str = ""
    extras: dict = field(default_factory=dict)


def _loss(cfg: StageConfig, step: int, model, teacher, source):
    """(loss Tensor, breakdown) for the batch of ``step``; prompt/dropout randomness is seeded per step."""
    from ..memory.stage2 import stage2_step
    from ..pcs_sim.stage3 import Stage3Batch, sample_queries, stage3_step
    from ..promptloop.stage1 import build_batch, stage1_step

    rng = substream(cfg.seed, "prompt", cfg.stage, step)
    w = cfg.loss_weights
    if cfg.stage == 1:
        batch = build_batch(source.scenes(step, cfg.batch_size), teacher, rng)
        loss, br = stage1_step(batch, model, teacher, w, cfg.refinement_loops, rng)
        return loss, {"feat": br["feat"], "mask": br["mask"], "task": br["task"], "score": 0.0}
    if cfg.stage == 2:
        parts, infos = [], []
        for clip in source.clips(step, cfg.batch_size):
            loss, info = stage2_step(clip, model, teacher, w, rng, cfg.readout_weight)
            parts.append(loss)
            infos.append(info)
        loss = T.add_n(parts) * (1.0 / len(parts))
        mean = {k: float(np.mean([i[k] for i in infos])) for k in ("mask", "score", "feat")}
        return loss, {"feat": mean["feat"], "mask": mean["mask"], "task": 0.0, "score": mean["score"]}
    images = source.scenes(step, cfg.batch_size)
    queries = [sample_queries(s, source.scene_config, rng, cfg.negatives_per_image, cfg.exemplar_prob) for s in images]
    clips = source.clips(step, cfg.clips_per_batch) if cfg.clips_per_batch else []
    loss, info = stage3_step(Stage3Batch(images, queries, clips), model, teacher, w, rng)
    return loss, {"feat": 0.0, "mask": info["mask"], "task": info["track"], "score": info["score"]}


def _optimizer(model: StudentModel, cfg: StageConfig) -> AdamW:
    groups = {"encoder": [], "other": []}
    for name in GROUPS:
        if name in cfg.trainable:
            groups["encoder" if name == "encoder" else "other"].extend(model[name].values())
    return AdamW(groups, cfg.weight_decay, cfg.clip_norm)


def _record(cfg: StageConfig, step: int, lr: float, loss: float, br: dict, wall_ms: float) -> dict:
    return {
        "stage": cfg.stage,
        "step": step,
        "lr": lr,
        "loss_total": loss,
        "loss_feat": br["feat"],
        "loss_mask": br["mask"],
        "loss_task": br["task"],
        "loss_score": br["score"],
        "wall_ms": wall_ms,
    }


def run_stage(
    cfg: StageConfig,
    source=None,
    checkpoint: str | Path | Checkpoint | None = None,
    out_dir: str | Path | None = None,
    model_config: ModelConfig | None = None,
    teacher: Teacher | None = None,
    log_path: str | Path | None = None,
    log_every: int = 1,
) -> RunResult:
    """Train one stage. A final record at step ``total_steps`` holds the loss after the last update."""
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if cfg.stage > 1 and (checkpoint is None or checkpoint.stage < cfg.stage - 1):
        have = "none" if checkpoint is None else f"stage {checkpoint.stage}"
        raise MissingCheckpointError(f"stage {cfg.stage} needs a stage-{cfg.stage - 1} checkpoint (got {have})")
    source = source or ProceduralSource(seed=cfg.seed)

    start, opt_state, ema = 0, None, None
    if checkpoint is None:
        model = init_student(model_config or ModelConfig(), substream(cfg.seed, "init"))
    else:
        model = checkpoint.model.copy()  # leave the caller's checkpoint untouched
        if checkpoint.stage == cfg.stage and 0 < checkpoint.step <= cfg.total_steps:
            start, opt_state, ema = checkpoint.step, checkpoint.optimizer, checkpoint.ema
    teacher = teacher or Teacher(TeacherConfig(), model.config)

    model.set_trainable(cfg.trainable)
    frozen = [g for g in GROUPS if g not in cfg.trainable]
    frozen_hash = model.param_hash(frozen)
    opt = _optimizer(model, cfg)
    if opt_state is not None:
        opt.state = opt_state
    if cfg.ema_decay is not None and ema is None:
        ema = {n: t.data.copy() for n, t in model.named_parameters()}

    records: list[dict] = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if start else "w")

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log_file.flush()

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(model, cfg.stage, step, opt.state, ema, cfg.to_dict())

    out = Path(out_dir) if out_dir is not None else None
    try:
        for step in range(start, cfg.total_steps):
            t0 = time.perf_counter()
            lr = lr_at(step, cfg)
            with Record() as rec:
                loss, br = _loss(cfg, step, model, teacher, source)
            backward(loss, rec)
            opt.step(lr)
            if ema is not None:
                ema = ema_update({n: t.data for n, t in model.named_parameters()}, ema, cfg.ema_decay)
            if step % log_every == 0:
                emit(_record(cfg, step, lr, loss.item(), br, (time.perf_counter() - t0) * 1e3))
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step_{step + 1:06d}", snapshot(step + 1))
        t0 = time.perf_counter()
        with no_record():
            loss, br = _loss(cfg, cfg.total_steps, model, teacher, source)
        emit(_record(cfg, cfg.total_steps, lr_at(cfg.total_steps, cfg), loss.item(), br, (time.perf_counter() - t0) * 1e3))
    finally:
        if log_file is not None:
            log_file.close()

    if model.param_hash(frozen) != frozen_hash:
        raise RuntimeError("frozen parameters changed during training")
    path = save_checkpoint(out / "final", snapshot(cfg.total_steps)) if out is not None else None
    return RunResult(model, ema, records, path, frozen_hash)


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def strip_wall(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]
