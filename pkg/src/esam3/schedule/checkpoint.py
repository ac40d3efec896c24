"""Checkpoint directories: manifest.json plus tensor files for weights, optimizer moments and EMA."""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..model import ModelConfig, StudentModel, init_student
from ..numerics import serialize
from .optim import AdamState

FORMAT = "esam3-checkpoint/1"
MANIFEST = "manifest.json"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: StudentModel
    stage: int
    step: int
    optimizer: AdamState | None = None
    ema: dict[str, np.ndarray] | None = None
    stage_config: dict | None = None
    path: Path | None = None


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def _write_arrays(root: Path, sub: str, arrays: dict[str, np.ndarray]) -> dict[str, str]:
    d = root / sub
    d.mkdir(parents=True, exist_ok=True)
    out = {}
    for name in sorted(arrays):
        serialize.save(arrays[name], d / f"{name}.tensor")
        out[name] = _digest(arrays[name])
    return out


def _read_arrays(root: Path, sub: str, names: dict[str, str]) -> dict[str, np.ndarray]:
    out = {}
    for name, digest in names.items():
        try:
            arr = serialize.load(root / sub / f"{name}.tensor").data
        except (OSError, serialize.CorruptTensorError) as exc:
            raise CheckpointError(f"{root}: cannot read {sub}/{name}: {exc}") from None
        if _digest(arr) != digest:
            raise CheckpointError(f"{root}: checksum mismatch for {sub}/{name}")
        out[name] = arr
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write into a temp sibling, then swap it in, so a crash never leaves a half checkpoint."""
    root = Path(path)
    tmp = root.with_name(root.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    weights = {name: t.data for name, t in ckpt.model.named_parameters()}
    manifest = {
        "format": FORMAT,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "model_config": ckpt.model.config.to_dict(),
        "stage_config": ckpt.stage_config,
        "weights": _write_arrays(tmp, "weights", weights),
        "trainable": sorted(ckpt.model.trainable_groups()),
    }
    if ckpt.optimizer is not None:
        moments = {f"m.{k}": v for k, v in ckpt.optimizer.m.items()}
        moments |= {f"v.{k}": v for k, v in ckpt.optimizer.v.items()}
        manifest["optimizer"] = {"step": ckpt.optimizer.step, "moments": _write_arrays(tmp, "optimizer", moments)}
    if ckpt.ema is not None:
        manifest["ema"] = _write_arrays(tmp, "ema", ckpt.ema)
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if root.exists():
        shutil.rmtree(root)
    tmp.rename(root)
    return root


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    mf = root / MANIFEST
    if not mf.exists():
        raise CheckpointError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{root}: unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_dict(manifest["model_config"])
    model = init_student(config, np.random.default_rng(0))
    weights = _read_arrays(root, "weights", manifest["weights"])
    names = {n for n, _ in model.named_parameters()}
    if names != set(weights):
        missing, extra = sorted(names - set(weights)), sorted(set(weights) - names)
        raise CheckpointError(f"{root}: parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in model.named_parameters():
        if t.shape != weights[name].shape:
            raise CheckpointError(f"{root}: shape mismatch for {name}")
        t.data = weights[name].copy()
    optimizer = None
    if "optimizer" in manifest:
        mom = _read_arrays(root, "optimizer", manifest["optimizer"]["moments"])
        m = {k[2:]: v for k, v in mom.items() if k.startswith("m.")}
        v = {k[2:]: a for k, a in mom.items() if k.startswith("v.")}
        optimizer = AdamState(int(manifest["optimizer"]["step"]), m, v)
    ema = _read_arrays(root, "ema", manifest["ema"]) if "ema" in manifest else None
    model.set_trainable(set(manifest.get("trainable", [])))
    return Checkpoint(model, int(manifest["stage"]), int(manifest["step"]), optimizer, ema, manifest.get("stage_config"), root)
