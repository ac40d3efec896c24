"""Deterministic stand-in teacher: frozen random conv features plus exact targets."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from ..model import EncoderConfig, encode, init_encoder
from ..numerics import tensor as T
from ..numerics.nn import ParamGroup
from ..numerics.tensor import Tensor, no_record
from ..pcs_sim.scenes import SyntheticScene, rasterize
from .cache import TeacherCache, cache_key
from .decoder import decode_prompt, image_tokens, init_prompt_decoder
from .prompts import PromptSet


@dataclass(frozen=True)
class TeacherConfig:
    mode: Literal["oracle", "trained"] = "oracle"
    widths: tuple[int, int, int] = (16, 32, 64)
    depth: int = 0
    seed: int = 1234
    fit_steps: int = 300
    fit_lr: float = 3e-3
    fit_batch: int = 4

    def to_dict(self) -> dict:
        return asdict(self)


class Teacher:
    """Features from a frozen seeded conv stack (C = widths[-1] at stride 16).

    In ``oracle`` mode masks are the ground truth at feature resolution and
    presence/track scores are exact. In ``trained`` mode a prompt decoder is
    first fit on the synthetic task (see :meth:`fit`) and its thresholded
    outputs replace the ground-truth masks.
    """

    def __init__(self, config: TeacherConfig, model_config, cache: TeacherCache | None = None) -> None:
        if config.widths[-1] != model_config.teacher_dim:
            raise ValueError("teacher width must equal model teacher_dim")
        self.config = config
        self.model_config = model_config
        self.cache = cache
        rng = np.random.default_rng(config.seed)
        self.encoder = ParamGroup("teacher_encoder")
        self.enc_cfg = EncoderConfig(widths=tuple(config.widths), depth=config.depth)
        init_encoder(self.encoder, self.enc_cfg, rng)
        self.encoder.set_trainable(False)
        self.decoder: ParamGroup | None = None
        self.concepts: Tensor | None = None
        if config.mode == "trained":
            self.decoder = ParamGroup("teacher_decoder")
            init_prompt_decoder(self.decoder, model_config, rng)
            self.concepts = Tensor(rng.standard_normal((model_config.num_concepts, model_config.concept_dim)))
            self.fitted = False
        self.prep = {"teacher": self.config.to_dict(), "image_size": model_config.image_size}

    def parameters(self) -> list[Tensor]:
        out = list(self.encoder.values())
        if self.decoder is not None:
            out += list(self.decoder.values()) + [self.concepts]
        return out

    def _encode(self, images: np.ndarray) -> np.ndarray:
        with no_record():
            return encode(self.encoder, Tensor(images), self.enc_cfg.depth).data

    def features(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) -> (B, h, w, C); never recorded."""
        return self._encode(np.asarray(images, dtype=np.float64))

    def scene_features(self, scene: SyntheticScene) -> np.ndarray:
        if self.cache is None:
            return self.features(scene.image[None])[0]
        key = cache_key(scene.scene_id, self.prep)
        return self.cache.get(key, lambda: Tensor(self.features(scene.image[None])[0])).data

    def feature_key(self, scene: SyntheticScene) -> str:
        return cache_key(scene.scene_id, self.prep)

    def mask(self, scene: SyntheticScene, index: int, prompts: PromptSet | None = None, feats=None) -> np.ndarray:
        gt = rasterize(scene.instances[index].mask, self.model_config.stride)
        if self.config.mode == "oracle":
            return gt
        if feats is None:
            feats = self.scene_features(scene)
        return self.decode(feats, prompts)

    def decode(self, feats: np.ndarray, prompts: PromptSet) -> np.ndarray:
        cfg = self.model_config
        with no_record():
            x = image_tokens(self.decoder, Tensor(feats), _pos(cfg))
            logits = decode_prompt(self.decoder, self.concepts, x, prompts, size=cfg.feature_size, image_size=cfg.image_size)
        return (logits.data >= 0.0).astype(np.float64)

    @staticmethod
    def presence(scene: SyntheticScene, concept_id: int) -> float:
        return 1.0 if concept_id in scene.concepts() else 0.0

    @staticmethod
    def track_score(mask: np.ndarray) -> float:
        return 1.0 if np.any(mask > 0) else 0.0

    def fit(self, scene_config, rng: np.random.Generator, steps: int | None = None) -> list[float]:
        """Briefly fit the teacher decoder on ground-truth masks (trained mode only)."""
        from ..losses import LossWeights, mask_terms
        from ..numerics.tensor import Record, backward
        from ..pcs_sim.scenes import gen_scene
        from ..schedule.optim import AdamW
        from .prompts import initial_prompt

        if self.decoder is None:
            raise RuntimeError("fit() needs a teacher in 'trained' mode")
        cfg = self.model_config
        w = LossWeights()
        params = list(self.decoder.values())
        self.decoder.set_trainable(True)
        opt = AdamW({"other": params}, weight_decay={"other": 0.0})
        losses = []
        for step in range(steps if steps is not None else self.config.fit_steps):
            seeds = rng.integers(0, 2**31, self.config.fit_batch)
            with Record() as rec:
                terms = []
                for s in seeds:
                    scene = gen_scene(scene_config, int(s))
                    x = image_tokens(self.decoder, Tensor(self.scene_features(scene)), _pos(cfg))
                    for i, inst in enumerate(scene.instances):
                        ps = PromptSet([initial_prompt(inst.mask, rng)], inst.concept_id)
                        logits = decode_prompt(self.decoder, self.concepts, x, ps, size=cfg.feature_size, image_size=cfg.image_size)
                        terms.append(mask_terms(logits, rasterize(inst.mask, cfg.stride), w))
                loss = T.sum(T.concat([T.reshape(t, (1,)) for t in terms])) * (1.0 / len(terms))
            backward(loss, rec)
            opt.step(lr=self.config.fit_lr)
            losses.append(loss.item())
        self.decoder.set_trainable(False)
        self.fitted = True
        return losses


def _pos(cfg) -> np.ndarray:
    from ..numerics.nn import grid_positions

    return grid_positions(cfg.feature_size, cfg.feature_size, cfg.embed_dim)
