"""Atrous-convolution decoder.

The four encoder maps are projected to a common width, upsampled to a
quarter of the input resolution, concatenated, fused with a dilated 3x3
convolution and turned into a one-channel logit map by a second one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Module
from .tensor import ConfigurationError, DimensionError, Tensor, ops


@dataclass(frozen=True)
class DecoderConfig:
    C_h: int = 768
    C_m: int = 256
    r: int = 2
    E: int = 3
    S: int = 1
    P: int = 2

    def __post_init__(self):
        # The atrous convolutions must leave H x W unchanged.
        if self.S != 1 or 2 * self.P != self.r * (self.E - 1):
            raise ConfigurationError(
                f"atrous conv (r={self.r}, E={self.E}, S={self.S}, P={self.P}) does not preserve size")


def unify_and_upsample(f: Tensor, proj: Conv2d, target: tuple[int, int]) -> Tensor:
    """Per-pixel linear map to C_h channels, then bilinear resize to ``target``."""
    H, W = f.shape[-2:]
    if target[0] < H or target[1] < W:
        raise ConfigurationError(f"unify_and_upsample: target {target} smaller than source {(H, W)}")
    return ops.bilinear_resize(proj(f), target)


def fuse(maps: list[Tensor], conv: Conv2d) -> Tensor:
    sizes = {m.shape[-2:] for m in maps}
    if len(sizes) != 1:
        raise DimensionError(f"fuse: spatial sizes differ: {sorted(sizes)}")
    return conv(ops.concat(maps, axis=1 if maps[0].ndim == 4 else 0))


def full_res_logits(m_raw: Tensor, size: tuple[int, int]) -> Tensor:
    return ops.bilinear_resize(m_raw, size)


def full_res_mask(m_raw: Tensor, size: tuple[int, int]) -> Tensor:
    """Upsample pre-activation logits to ``size`` and apply the logistic."""
    return ops.sigmoid(full_res_logits(m_raw, size))


class Decoder(Module):
    def __init__(self, rng: np.random.Generator, in_channels: list[int], cfg: DecoderConfig = DecoderConfig()):
        self.cfg = cfg
        self.unify = [Conv2d(rng, c, cfg.C_h, 1) for c in in_channels]
        self.fuse = Conv2d(rng, len(in_channels) * cfg.C_h, cfg.C_m, cfg.E,
                           stride=cfg.S, padding=cfg.P, dilation=cfg.r)
        self.head = Conv2d(rng, cfg.C_m, 1, cfg.E, stride=cfg.S, padding=cfg.P, dilation=cfg.r)

    def upsampled(self, features: list[Tensor]) -> list[Tensor]:
        target = tuple(features[0].shape[-2:])
        return [unify_and_upsample(f, proj, target) for f, proj in zip(features, self.unify)]

    def forward(self, features: list[Tensor]) -> Tensor:
        """Return the quarter-resolution logit map ``(B, 1, H/4, W/4)``."""
        fused = fuse(self.upsampled(features), self.fuse)
        return self.predict_head(fused)

    def predict_head(self, fused: Tensor) -> Tensor:
        return self.head(fused)
