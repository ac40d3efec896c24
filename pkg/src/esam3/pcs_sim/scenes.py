"""Procedural images and clips of coloured shapes with concept labels."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.92, 0.85, 0.15),
}
BACKGROUND = (0.12, 0.12, 0.12)


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    instance_range: tuple[int, int] = (2, 4)
    size_range: tuple[int, int] = (32, 56)
    concept_weights: tuple[float, ...] | None = None
    allow_occlusion: bool = True
    min_visible_fraction: float = 0.4
    feature_stride: int = 16
    noise: float = 0.03
    color_jitter: float = 0.04
    # clips
    clip_len_range: tuple[int, int] = (4, 8)
    speed_range: tuple[float, float] = (2.0, 6.0)
    occlusion_event_prob: float = 0.15
    distractor_prob: float = 0.5
    max_attempts: int = 200

    def __post_init__(self) -> None:
        if self.image_size % 64:
            raise SceneConfigError("image_size must be a multiple of 64")
        if self.image_size % self.feature_stride:
            raise SceneConfigError("feature_stride must divide image_size")
        for s in self.shapes:
            if s not in SHAPES:
                raise SceneConfigError(f"unknown shape {s!r}")
        for c in self.colors:
            if c not in COLORS:
                raise SceneConfigError(f"unknown color {c!r}")
        lo, hi = self.instance_range
        if not 1 <= lo <= hi:
            raise SceneConfigError(f"bad instance_range {self.instance_range}")
        smin, smax = self.size_range
        if not 0 < smin <= smax <= self.image_size:
            raise SceneConfigError(f"bad size_range {self.size_range}")
        # the smallest shapes must fit without overlap when occlusion is off,
        # and in any case cannot cover more than the frame
        budget = 0.9 if self.allow_occlusion else 0.45
        if hi * smin * smin * 0.5 > budget * self.image_size**2:
            raise SceneConfigError(
                f"{hi} instances of size >= {smin} cannot fit in a {self.image_size}px frame"
            )
        if self.concept_weights is not None:
            if len(self.concept_weights) != self.num_concepts:
                raise SceneConfigError("concept_weights must have one entry per concept")
            if any(w < 0 for w in self.concept_weights) or sum(self.concept_weights) <= 0:
                raise SceneConfigError("concept_weights must be non-negative with positive sum")
        lo, hi = self.clip_len_range
        if not 2 <= lo <= hi:
            raise SceneConfigError(f"bad clip_len_range {self.clip_len_range}")

    @property
    def num_concepts(self) -> int:
        return len(self.shapes) * len(self.colors)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.feature_stride

    def concept(self, concept_id: int) -> tuple[str, str]:
        return self.shapes[concept_id // len(self.colors)], self.colors[concept_id % len(self.colors)]

    def concept_id(self, shape: str, color: str) -> int:
        return self.shapes.index(shape) * len(self.colors) + self.colors.index(color)

    def concept_distribution(self) -> np.ndarray:
        w = np.ones(self.num_concepts) if self.concept_weights is None else np.asarray(self.concept_weights, float)
        return w / w.sum()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SceneConfigError(f"unknown scene config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Instance:
    mask: np.ndarray  # (H, W) bool at image resolution
    concept_id: int
    identity: int


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    instances: list[Instance]
    scene_id: str
    motion: dict[int, tuple[float, float]] = field(default_factory=dict)

    def concepts(self) -> set[int]:
        return {inst.concept_id for inst in self.instances}

    def identities(self) -> list[int]:
        return [inst.identity for inst in self.instances]

    def instance(self, identity: int) -> Instance | None:
        for inst in self.instances:
            if inst.identity == identity:
                return inst
        return None


def rasterize(mask: np.ndarray, stride: int) -> np.ndarray:
    """Binary mask at feature resolution: a cell is on when at least half its pixels are."""
    h, w = mask.shape
    cover = mask.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))
    return (cover >= 0.5).astype(np.float64)


def _shape_mask(kind: str, cx: float, cy: float, size: float, n: int) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    half = size / 2.0
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half * half
    if kind == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    top = cy - half
    return (ys >= top) & (ys <= cy + half) & (np.abs(xs - cx) <= (ys - top) / 2.0)


@dataclass
class _Layout:
    kind: str
    color: np.ndarray
    concept_id: int
    identity: int
    cx: float
    cy: float
    size: float
    vx: float = 0.0
    vy: float = 0.0
    hidden: tuple[int, int] = (0, 0)  # frames [a, b) with no visibility


def _render(layouts: list[_Layout], cfg: SceneConfig, rng: np.random.Generator, frame: int, scene_id: str):
    n = cfg.image_size
    img = np.empty((n, n, 3))
    img[:] = BACKGROUND
    shapes = []
    for lay in layouts:
        if lay.hidden[0] <= frame < lay.hidden[1]:
            shapes.append(None)
            continue
        m = _shape_mask(lay.kind, lay.cx, lay.cy, lay.size, n)
        img[m] = lay.color
        shapes.append(m)
    img += rng.normal(0.0, cfg.noise, img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    instances, full = [], []
    covered = np.zeros((n, n), bool)
    for lay, m in zip(reversed(layouts), reversed(shapes)):
        if m is None:
            continue
        visible = m & ~covered
        covered |= m
        instances.append(Instance(visible, lay.concept_id, lay.identity))
        full.append(m)
    instances.reverse()
    full.reverse()
    motion = {lay.identity: (lay.vx, lay.vy) for lay in layouts}
    return SyntheticScene(img, instances, scene_id, motion), full


def _acceptable(scene: SyntheticScene, full: list[np.ndarray], cfg: SceneConfig) -> bool:
    for inst, m in zip(scene.instances, full):
        if not cfg.allow_occlusion and inst.mask.sum() < m.sum():
            return False
        if inst.mask.sum() < cfg.min_visible_fraction * m.sum():
            return False
        if rasterize(inst.mask, cfg.feature_stride).sum() == 0:
            return False
    return True


def _draw_layouts(cfg: SceneConfig, rng: np.random.Generator, count: int, concepts: list[int]) -> list[_Layout]:
    out = []
    for identity, cid in enumerate(concepts[:count]):
        kind, color = cfg.concept(cid)
        size = rng.uniform(*cfg.size_range)
        half = size / 2.0
        cx = rng.uniform(half, cfg.image_size - half)
        cy = rng.uniform(half, cfg.image_size - half)
        base = np.array(COLORS[color])
        jitter = rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
        out.append(_Layout(kind, np.clip(base + jitter, 0, 1), cid, identity, cx, cy, size))
    return out


def _sample_concepts(cfg: SceneConfig, rng: np.random.Generator, count: int) -> list[int]:
    return [int(c) for c in rng.choice(cfg.num_concepts, size=count, p=cfg.concept_distribution())]


def gen_scene(config: SceneConfig, seed: int) -> SyntheticScene:
    """One image; deterministic per (config, seed)."""
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    count = int(rng.integers(config.instance_range[0], config.instance_range[1] + 1))
    concepts = _sample_concepts(config, rng, count)
    scene_id = f"img-{config.digest()}-{seed}"
    for _ in range(config.max_attempts):
        layouts = _draw_layouts(config, rng, count, concepts)
        scene, full = _render(layouts, config, rng, 0, scene_id)
        if _acceptable(scene, full, config):
            return scene
    raise SceneConfigError(f"could not place {count} instances after {config.max_attempts} attempts")


def gen_clip(config: SceneConfig, seed: int, length: int | None = None) -> list[SyntheticScene]:
    """A short clip with per-identity linear motion (bouncing at the borders).

    Identities may vanish for a few frames (occlusion events) and reappear.
    All identities are visible in frame 0. With ``distractor_prob`` the second
    identity copies the first one's concept, so appearance alone cannot tell
    them apart.
    """
    rng = np.random.default_rng([int(seed), 0xC11B])
    if length is None:
        length = int(rng.integers(config.clip_len_range[0], config.clip_len_range[1] + 1))
    count = int(rng.integers(config.instance_range[0], config.instance_range[1] + 1))
    concepts = _sample_concepts(config, rng, count)
    if count >= 2 and rng.random() < config.distractor_prob:
        concepts[1] = concepts[0]
    clip_id = f"clip-{config.digest()}-{seed}"
    n = config.image_size
    for _ in range(config.max_attempts):
        layouts = _draw_layouts(config, rng, count, concepts)
        for lay in layouts:
            speed = rng.uniform(*config.speed_range)
            angle = rng.uniform(0, 2 * np.pi)
            lay.vx, lay.vy = speed * np.cos(angle), speed * np.sin(angle)
            if length > 2 and rng.random() < config.occlusion_event_prob:
                a = int(rng.integers(1, length - 1))
                b = int(rng.integers(a + 1, min(a + 3, length) + 1))
                lay.hidden = (a, b)
        frames = []
        ok = True
        for t in range(length):
            scene, full = _render(layouts, config, rng, t, f"{clip_id}-f{t}")
            if t == 0 and not (_acceptable(scene, full, config) and len(scene.instances) == count):
                ok = False
                break
            # later frames may lose identities to occlusion; drop the invisible ones
            scene.instances = [
                inst for inst in scene.instances if rasterize(inst.mask, config.feature_stride).sum() > 0
            ]
            frames.append(scene)
            for lay in layouts:
                half = lay.size / 2.0
                lay.cx += lay.vx
                lay.cy += lay.vy
                if lay.cx < half or lay.cx > n - half:
                    lay.vx = -lay.vx
                    lay.cx = float(np.clip(lay.cx, half, n - half))
                if lay.cy < half or lay.cy > n - half:
                    lay.vy = -lay.vy
                    lay.cy = float(np.clip(lay.cy, half, n - half))
        if ok:
            return frames
    raise SceneConfigError(f"could not place {count} instances after {config.max_attempts} attempts")


def feature_masks(scene: SyntheticScene, stride: int) -> np.ndarray:
    if not scene.instances:
        return np.zeros((0, scene.image.shape[0] // stride, scene.image.shape[1] // stride))
    return np.stack([rasterize(inst.mask, stride) for inst in scene.instances])


def hard_negative_concepts(scene: SyntheticScene, config: SceneConfig) -> list[int]:
    """Absent concepts that share a shape or a colour with a present one."""
    present = scene.concepts()
    shapes = {config.concept(c)[0] for c in present}
    colors = {config.concept(c)[1] for c in present}
    out = []
    for cid in range(config.num_concepts):
        if cid in present:
            continue
        s, c = config.concept(cid)
        if s in shapes or c in colors:
            out.append(cid)
    return out
