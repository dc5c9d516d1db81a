"""Named training presets and loss ablations."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .domain import ConfigError, TrainConfig
from .prompt_generator import GeneratorConfig

# generator architecture keys accepted next to the TrainConfig keys in config files
GENERATOR_KEYS = ("encoder_widths", "decoder_upsample_blocks")


@dataclass(frozen=True)
class Preset:
    name: str
    train: TrainConfig
    generator: dict = field(default_factory=dict)
    image_size: tuple[int, int] = (256, 256)
    description: str = ""

    def fingerprint(self) -> str:
        blob = json.dumps({"train": self.train.to_dict(), "generator": self.generator,
                           "image_size": list(self.image_size)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PAPER_WIDTHS = (192, 256, 320, 480, 720, 1280)

PRESETS = {
    "paper-20shot": Preset(
        "paper-20shot", TrainConfig(),
        {"encoder_widths": PAPER_WIDTHS, "decoder_upsample_blocks": 2}, (1024, 1024),
        "20 training samples, 200 epochs, batch 4, lr 1e-4 dropped x0.1 midway"),
    "paper-fulldata-hc18": Preset(
        "paper-fulldata-hc18", TrainConfig(epochs=20, barrier_factor=2.0, barrier_every_epochs=1),
        {"encoder_widths": PAPER_WIDTHS, "decoder_upsample_blocks": 2}, (1024, 1024),
        "full training set, 20 epochs, barrier t doubled every epoch"),
    # paper loss weights and schedule; a deeper but narrow encoder for 256 px inputs
    "desk-synthetic": Preset(
        "desk-synthetic", TrainConfig(),
        {"encoder_widths": (8, 16, 32, 64, 64), "decoder_upsample_blocks": 2}, (256, 256),
        "toy backbone on 256x256 synthetic blobs with the paper's optimisation settings"),
}

# which of lambda2..lambda4 each ablation switches off
ABLATIONS = {
    "full": (),
    "pseudo-only": ("lambda2", "lambda3", "lambda4"),
    "no-consistency": ("lambda4",),
    "pseudo+size": ("lambda3", "lambda4"),
    "pseudo+empty": ("lambda2", "lambda4"),
}
ABLATIONS["pseudo+constraints"] = ABLATIONS["no-consistency"]


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


def apply_ablation(config: TrainConfig, ablation: str) -> TrainConfig:
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; available: {', '.join(ABLATIONS)}")
    return config.replace(**{k: 0.0 for k in ABLATIONS[ablation]})


def merge_overrides(preset: Preset, overrides: dict) -> Preset:
    """Apply a flat mapping of config keys on top of ``preset``."""
    overrides = dict(overrides or {})
    gen = dict(preset.generator)
    for k in GENERATOR_KEYS:
        if k in overrides:
            gen[k] = overrides.pop(k)
    if "encoder_widths" in gen:
        gen["encoder_widths"] = tuple(int(w) for w in gen["encoder_widths"])
    image_size = tuple(overrides.pop("image_size", preset.image_size))
    train = TrainConfig.from_dict({**preset.train.to_dict(), **overrides})
    return Preset(preset.name, train, gen, image_size, preset.description)


def generator_config(preset: Preset, backbone) -> GeneratorConfig:
    """Generator architecture from the preset, shaped to match ``backbone``."""
    d = backbone.descriptor
    return GeneratorConfig(**preset.generator, output_shape=d.embedding_shape, input_size=d.input_size)
