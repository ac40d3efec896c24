"""Student variants: nominal sizes of the full models and toy encoders that keep their order."""

from __future__ import annotations

from dataclasses import dataclass

from ..model import EncoderConfig, ModelConfig


@dataclass(frozen=True)
class ModelZooEntry:
    name: str
    family: str
    backbone: str
    nominal_params: float  # millions, full-scale model
    encoder: EncoderConfig

    @property
    def toy_params(self) -> int:
        return self.encoder.num_params()

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig(encoder=self.encoder, **overrides)


ZOO: dict[str, ModelZooEntry] = {
    e.name: e
    for e in (
        ModelZooEntry("ES-RV-S", "RepViT", "RepViT-M0.9", 5.1, EncoderConfig((16, 32, 48), 1)),
        ModelZooEntry("ES-RV-M", "RepViT", "RepViT-M1.1", 6.8, EncoderConfig((16, 32, 56), 1)),
        ModelZooEntry("ES-RV-L", "RepViT", "RepViT-M2.3", 8.2, EncoderConfig((16, 40, 64), 1)),
        ModelZooEntry("ES-TV-S", "TinyViT", "TinyViT-5M", 5.4, EncoderConfig((16, 32, 48), 1)),
        ModelZooEntry("ES-TV-M", "TinyViT", "TinyViT-11M", 11.0, EncoderConfig((24, 48, 64), 1)),
        ModelZooEntry("ES-TV-L", "TinyViT", "TinyViT-21M", 21.0, EncoderConfig((32, 64, 96), 1)),
        ModelZooEntry("ES-EV-S", "EfficientViT", "EfficientViT-B0", 0.7, EncoderConfig((8, 16, 32), 0)),
        ModelZooEntry("ES-EV-M", "EfficientViT", "EfficientViT-B1", 4.8, EncoderConfig((16, 32, 48), 0)),
        ModelZooEntry("ES-EV-L", "EfficientViT", "EfficientViT-B2", 15.0, EncoderConfig((24, 48, 80), 1)),
    )
}

DEFAULT_VARIANT = "ES-RV-S"


def family(name: str) -> list[ModelZooEntry]:
    return sorted((e for e in ZOO.values() if e.family == name), key=lambda e: e.nominal_params)


def get(name: str) -> ModelZooEntry:
    try:
        return ZOO[name]
    except KeyError:
        raise KeyError(f"unknown model variant {name!r}; known: {sorted(ZOO)}") from None
