"""Datasets on disk: a JSON manifest plus one tensor file per image and mask."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics import serialize
from ..rng import substream
from .scenes import Instance, SceneConfig, SceneConfigError, SyntheticScene, gen_clip, gen_scene

FORMAT = "esam3-dataset/1"
MANIFEST = "manifest.json"


@dataclass
class DatasetConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    num_scenes: int = 10
    num_clips: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - {"scene", "num_scenes", "num_clips"}
        if unknown:
            raise SceneConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        scene = SceneConfig.from_dict(d.get("scene", {}))
        out = cls(scene, int(d.get("num_scenes", 10)), int(d.get("num_clips", 0)))
        if out.num_scenes < 0 or out.num_clips < 0:
            raise SceneConfigError("scene and clip counts must be non-negative")
        return out


def item_seeds(seed: int, kind: str, n: int) -> list[int]:
    return [int(s) for s in substream(seed, f"data-{kind}").integers(0, 2**31 - 1, n)]


def _write_scene(scene: SyntheticScene, root: Path, rel: str) -> dict:
    d = root / rel
    d.mkdir(parents=True, exist_ok=True)
    serialize.save(scene.image, d / "image.tensor")
    for k, inst in enumerate(scene.instances):
        serialize.save(inst.mask.astype(np.float64), d / f"mask_{k}.tensor")
    return {
        "id": scene.scene_id,
        "path": rel,
        "instances": [{"concept_id": i.concept_id, "identity": i.identity} for i in scene.instances],
        "motion": {str(k): list(v) for k, v in sorted(scene.motion.items())},
    }


def write_dataset(config: DatasetConfig, out: str | Path, seed: int) -> dict:
    """Generate and write scenes and clips; the output is byte-identical per (config, seed)."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    scenes = []
    for i, s in enumerate(item_seeds(seed, "scenes", config.num_scenes)):
        scenes.append(_write_scene(gen_scene(config.scene, s), root, f"scenes/{i:05d}") | {"seed": s})
    clips = []
    for i, s in enumerate(item_seeds(seed, "clips", config.num_clips)):
        frames = [_write_scene(f, root, f"clips/{i:05d}/{t:02d}") for t, f in enumerate(gen_clip(config.scene, s))]
        clips.append({"seed": s, "frames": frames})
    manifest = {
        "format": FORMAT,
        "seed": seed,
        "scene_config": config.scene.to_dict(),
        "scenes": scenes,
        "clips": clips,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _read_scene(root: Path, entry: dict) -> SyntheticScene:
    d = root / entry["path"]
    image = serialize.load(d / "image.tensor").data
    insts = []
    for k, meta in enumerate(entry["instances"]):
        mask = serialize.load(d / f"mask_{k}.tensor").data > 0.5
        insts.append(Instance(mask, int(meta["concept_id"]), int(meta["identity"])))
    motion = {int(k): tuple(v) for k, v in entry.get("motion", {}).items()}
    return SyntheticScene(image, insts, entry["id"], motion)


@dataclass
class Dataset:
    root: Path
    manifest: dict
    scenes: list[SyntheticScene]
    clips: list[list[SyntheticScene]]

    @property
    def scene_config(self) -> SceneConfig:
        return SceneConfig.from_dict(self.manifest["scene_config"])


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    mf = root / MANIFEST
    if not mf.exists():
        raise FileNotFoundError(f"no dataset manifest at {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    scenes = [_read_scene(root, e) for e in manifest["scenes"]]
    clips = [[_read_scene(root, f) for f in c["frames"]] for c in manifest["clips"]]
    return Dataset(root, manifest, scenes, clips)
