"""Student model container: named parameter groups plus the architecture config."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import tensor as T
from .numerics.nn import ParamGroup, conv, conv_init, grid_positions, linear, linear_init
from .numerics.tensor import Tensor

GROUPS = (
    "encoder",
    "projection",
    "decoder",
    "presence_head",
    "perceiver",
    "tracking_head",
    "concept_embedding",
)


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, int, int] = (16, 32, 48)
    depth: int = 1  # residual 3x3 convs at the last stage

    def num_params(self) -> int:
        w1, w2, w3 = self.widths
        n = 4 * 4 * 3 * w1 + w1 + 9 * w1 * w2 + w2 + 9 * w2 * w3 + w3
        return n + self.depth * (9 * w3 * w3 + w3)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    teacher_dim: int = 64
    embed_dim: int = 32
    concept_dim: int = 16
    num_concepts: int = 12
    feature_size: int = 8  # h = w of the feature map
    image_size: int = 128
    mem_dim: int = 32
    d_k: int = 32
    num_latents: int = 128
    k_global: int = 16
    window_grid: tuple[int, int] = (4, 4)
    bank_capacity: int = 7
    num_queries: int = 4
    perceiver_dropout: float = 0.1

    @property
    def stride(self) -> int:
        return self.image_size // self.feature_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", {})
        enc = EncoderConfig(widths=tuple(enc.get("widths", (16, 32, 48))), depth=enc.get("depth", 1))
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(encoder=enc, **kw)


class StudentModel:
    def __init__(self, config: ModelConfig, groups: dict[str, ParamGroup]) -> None:
        self.config = config
        self.groups = groups
        self.pos = grid_positions(config.feature_size, config.feature_size, config.embed_dim)
        self.mem_pos = grid_positions(config.feature_size, config.feature_size, config.mem_dim)

    def __getitem__(self, name: str) -> ParamGroup:
        return self.groups[name]

    def named_parameters(self):
        for g in GROUPS:
            for k, t in self.groups[g].items():
                yield f"{g}.{k}", t

    def set_trainable(self, trainable: set[str]) -> None:
        for name, g in self.groups.items():
            g.set_trainable(name in trainable)

    def trainable_groups(self) -> set[str]:
        return {n for n, g in self.groups.items() if g and all(t.requires_grad for t in g.values())}

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def param_hash(self, groups=None) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            if groups is None or name.split(".", 1)[0] in groups:
                h.update(name.encode())
                h.update(t.data.tobytes())
        return h.hexdigest()

    def copy(self) -> "StudentModel":
        groups = {}
        for name, g in self.groups.items():
            ng = ParamGroup(name)
            for k, t in g.items():
                ng[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
            groups[name] = ng
        return StudentModel(self.config, groups)

    def num_params(self, group: str | None = None) -> int:
        if group is not None:
            return self.groups[group].num_params()
        return sum(g.num_params() for g in self.groups.values())


def init_student(config: ModelConfig, rng: np.random.Generator) -> StudentModel:
    from .memory.perceiver import init_perceiver
    from .memory.tracker import init_tracking_head
    from .pcs_sim.detector import init_detector
    from .promptloop.decoder import init_prompt_decoder

    groups = {name: ParamGroup(name) for name in GROUPS}
    init_encoder(groups["encoder"], config.encoder, rng)
    init_projection(groups["projection"], config.encoder.widths[-1], config.teacher_dim, rng)
    init_prompt_decoder(groups["decoder"], config, rng)
    init_detector(groups["decoder"], groups["presence_head"], config, rng)
    init_perceiver(groups["perceiver"], config, rng)
    init_tracking_head(groups["tracking_head"], config, rng)
    groups["concept_embedding"].add("table", rng.standard_normal((config.num_concepts, config.concept_dim)))
    linear_init(groups["concept_embedding"], rng, "exemplar", config.teacher_dim, config.concept_dim)
    return StudentModel(config, groups)


def init_encoder(g: ParamGroup, cfg: EncoderConfig, rng: np.random.Generator, in_ch: int = 3) -> None:
    w1, w2, w3 = cfg.widths
    conv_init(g, rng, "stem", 4, in_ch, w1)
    conv_init(g, rng, "down1", 3, w1, w2)
    conv_init(g, rng, "down2", 3, w2, w3)
    for i in range(cfg.depth):
        conv_init(g, rng, f"block{i}", 3, w3, w3, gain=1.0)


def encode(g: ParamGroup, images, depth: int) -> Tensor:
    """(B, H, W, 3) images -> (B, H/16, W/16, C) features."""
    x = T.relu(conv(images, g, "stem", stride=4))
    x = T.relu(conv(x, g, "down1", stride=2, pad=1))
    x = T.relu(conv(x, g, "down2", stride=2, pad=1))
    for i in range(depth):
        x = x + T.relu(conv(x, g, f"block{i}", pad=1))
    return x


def init_projection(g: ParamGroup, c_in: int, c_out: int, rng: np.random.Generator) -> None:
    linear_init(g, rng, "fc1", c_in, c_out, gain=2.0)
    linear_init(g, rng, "fc2", c_out, c_out)


def project(g: ParamGroup, feats) -> Tensor:
    """Alignment head: per-cell two-layer MLP to the teacher's channel count."""
    return linear(T.relu(linear(feats, g, "fc1")), g, "fc2")


def student_features(model: StudentModel, images) -> Tensor:
    x = encode(model["encoder"], images, model.config.encoder.depth)
    return project(model["projection"], x)


def config_digest(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
