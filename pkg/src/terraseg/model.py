"""Encoder + decoder segmentation model and its presets."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .decoder import Decoder, DecoderConfig, full_res_logits
from .encoder import PAPER_STAGES, Encoder, StageConfig
from .nn import Module
from .tensor import Tensor, no_grad, ops


@dataclass(frozen=True)
class ModelConfig:
    name: str
    stages: tuple[StageConfig, ...]
    decoder: DecoderConfig
    input_size: int
    in_channels: int = 15
    # Foreground prior for the head bias; None leaves it at zero.
    head_prior: float | None = None


PRESETS = {
    "paper": ModelConfig("paper", PAPER_STAGES, DecoderConfig(768, 256), 512),
    "tiny": ModelConfig(
        "tiny",
        (
            StageConfig(E=7, S=4, P=3, C=32, L=1, h=1, R=16),
            StageConfig(E=3, S=2, P=1, C=64, L=1, h=2, R=4),
            StageConfig(E=3, S=2, P=1, C=128, L=2, h=4, R=1),
            StageConfig(E=3, S=2, P=1, C=256, L=1, h=8, R=1),
        ),
        DecoderConfig(512, 256),
        128,
        head_prior=0.03,
    ),
    # Gradient-check size.
    "micro": ModelConfig(
        "micro",
        (
            StageConfig(E=7, S=4, P=3, C=4, L=1, h=1, R=4),
            StageConfig(E=3, S=2, P=1, C=8, L=1, h=2, R=2),
            StageConfig(E=3, S=2, P=1, C=16, L=1, h=2, R=1),
            StageConfig(E=3, S=2, P=1, C=32, L=1, h=4, R=1),
        ),
        DecoderConfig(8, 8),
        32,
    ),
}


def get_preset(name: str, in_channels: int | None = None) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if in_channels is not None and in_channels != cfg.in_channels:
        cfg = dataclasses.replace(cfg, in_channels=in_channels)
    return cfg


class SegModel(Module):
    """Hierarchical transformer encoder with the atrous decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.encoder = Encoder(rng, cfg.stages, cfg.in_channels)
        self.decoder = Decoder(rng, [s.C for s in cfg.stages], cfg.decoder)
        if cfg.head_prior is not None:
            if not 0 < cfg.head_prior < 1:
                raise ValueError(f"head_prior must lie in (0, 1), got {cfg.head_prior}")
            self.decoder.head.bias.data[:] = -math.log((1 - cfg.head_prior) / cfg.head_prior)

    def quarter_logits(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x))

    def forward(self, x: Tensor) -> Tensor:
        """Full-resolution logits ``(B, 1, H, W)``."""
        if x.ndim == 3:
            x = ops.reshape(x, (1, *x.shape))
        return full_res_logits(self.quarter_logits(x), x.shape[-2:])

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Probability map(s) for a raw array input, without recording a tape."""
        with no_grad():
            logits = self.forward(Tensor(x))
            return ops.sigmoid(logits).data[:, 0]


def build_model(preset: str = "tiny", seed: int = 0, in_channels: int | None = None) -> SegModel:
    return SegModel(get_preset(preset, in_channels), seed)
