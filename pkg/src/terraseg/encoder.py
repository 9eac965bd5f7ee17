"""Four-stage hierarchical transformer encoder.

Each stage embeds its input with an overlapping strided convolution, runs
``L`` pre-norm transformer blocks (sequence-reduced multi-head attention
followed by a Mix-FFN), normalizes, and folds the tokens back into a
feature map for the next stage and for the decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, DepthwiseConv2d, LayerNorm, Linear, Module, uniform_init
from .tensor import ConfigurationError, DimensionError, Tensor, ops

ATTRIBUTE_LAYOUT = ("aspect", "flow_accumulation", "slope", "ndvi", "yield")


@dataclass(frozen=True)
class StageConfig:
    """Patch size E, stride S, padding P, width C, depth L, heads h, reduction R."""

    E: int
    S: int
    P: int
    C: int
    L: int
    h: int = 1
    R: int = 1

    def __post_init__(self):
        if self.E < 1 or self.S < 1 or self.P < 0:
            raise ConfigurationError(f"stage needs E,S >= 1 and P >= 0: {self}")
        if self.C % self.h:
            raise ConfigurationError(f"width C={self.C} not divisible by heads h={self.h}")
        if self.R < 1 or self.L < 0:
            raise ConfigurationError(f"stage needs R >= 1, L >= 0: {self}")

    def output_size(self, n: int) -> int:
        return ops.conv_output_size(n, self.E, self.S, self.P)


PAPER_STAGES = (
    StageConfig(E=7, S=4, P=3, C=64, L=3, h=1, R=64),
    StageConfig(E=3, S=2, P=1, C=128, L=3, h=2, R=16),
    StageConfig(E=3, S=2, P=1, C=320, L=18, h=5, R=4),
    StageConfig(E=3, S=2, P=1, C=512, L=3, h=8, R=1),
)


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_sr: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, C: int, R: int) -> "AttentionParams":
        def sq():
            return uniform_init(rng, (C, C), C)

        w_sr = uniform_init(rng, (R * C, C), R * C) if R > 1 else None
        return cls(sq(), sq(), sq(), sq(), w_sr)


def sequence_reduce(seq: Tensor, R: int, proj: Tensor | None) -> Tensor:
    """Merge every R consecutive tokens and project ``R*C -> C``.

    ``seq`` is ``(N, C)`` or ``(B, N, C)``.
    """
    *lead, N, C = seq.shape
    if N % R:
        raise ConfigurationError(f"sequence reduction R={R} does not divide N={N}")
    if R == 1 and proj is None:
        return seq
    merged = ops.reshape(seq, (*lead, N // R, R * C))
    if proj is None or proj.shape != (R * C, C):
        raise DimensionError(f"sequence_reduce: need a ({R * C}, {C}) projection")
    return ops.matmul(merged, proj)


def multi_head_attention(seq: Tensor, params: AttentionParams, h: int, R: int,
                         return_weights: bool = False):
    """Sequence-reduced multi-head self-attention over ``(B, N, C)`` tokens."""
    squeeze = seq.ndim == 2
    if squeeze:
        seq = ops.reshape(seq, (1, *seq.shape))
    B, N, C = seq.shape
    if C % h:
        raise ConfigurationError(f"C={C} not divisible by h={h}")
    d = C // h

    kv_in = sequence_reduce(seq, R, params.w_sr)
    Nk = kv_in.shape[1]

    def heads(x, n):
        return ops.transpose(ops.reshape(x, (B, n, h, d)), (0, 2, 1, 3))

    q = heads(ops.matmul(seq, params.w_q), N)
    k = heads(ops.matmul(kv_in, params.w_k), Nk)
    v = heads(ops.matmul(kv_in, params.w_v), Nk)
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))        # (B, h, N, Nk)
    weights = ops.softmax_scaled(scores, math.sqrt(d))
    ctx = ops.matmul(weights, v)                                   # (B, h, N, d)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, N, C))
    out = ops.matmul(ctx, params.w_o)
    if squeeze:
        out = ops.reshape(out, (N, C))
    return (out, weights) if return_weights else out


class Attention(Module):
    def __init__(self, rng, C: int, h: int, R: int):
        p = AttentionParams.init(rng, C, R)
        self.w_q, self.w_k, self.w_v, self.w_o, self.w_sr = p.w_q, p.w_k, p.w_v, p.w_o, p.w_sr
        self.h, self.R = h, R

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_o, self.w_sr)

    def forward(self, seq: Tensor, return_weights: bool = False):
        return multi_head_attention(seq, self.params, self.h, self.R, return_weights)


class MixFFN(Module):
    """Expand C->4C, 3x3 depthwise conv on the token grid, GELU, contract."""

    expansion = 4

    def __init__(self, rng, C: int):
        hidden = self.expansion * C
        self.fc1 = Linear(rng, C, hidden)
        self.dw = DepthwiseConv2d(rng, hidden, kernel=3, padding=1)
        self.fc2 = Linear(rng, hidden, C)

    def forward(self, seq: Tensor, hw: tuple[int, int]) -> Tensor:
        B, N, _ = seq.shape
        H, W = hw
        if H * W != N:
            raise DimensionError(f"mix_ffn: {N} tokens cannot form a {H}x{W} grid")
        x = self.fc1(seq)
        hidden = x.shape[-1]
        x = ops.transpose(ops.reshape(x, (B, H, W, hidden)), (0, 3, 1, 2))
        x = ops.gelu(self.dw(x))
        x = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (B, N, hidden))
        return self.fc2(x)


class TransformerBlock(Module):
    def __init__(self, rng, cfg: StageConfig):
        self.norm1 = LayerNorm(cfg.C)
        self.attn = Attention(rng, cfg.C, cfg.h, cfg.R)
        self.norm2 = LayerNorm(cfg.C)
        self.ffn = MixFFN(rng, cfg.C)

    def forward(self, seq: Tensor, hw: tuple[int, int]) -> Tensor:
        seq = seq + self.attn(self.norm1(seq))
        return seq + self.ffn(self.norm2(seq), hw)


class PatchMerge(Module):
    def __init__(self, rng, c_in: int, cfg: StageConfig):
        self.proj = Conv2d(rng, c_in, cfg.C, cfg.E, stride=cfg.S, padding=cfg.P)
        self.norm = LayerNorm(cfg.C)

    def forward(self, x: Tensor) -> tuple[Tensor, tuple[int, int]]:
        return overlapped_patch_merge(x, self.proj, self.norm)


def overlapped_patch_merge(x: Tensor, proj: Conv2d, norm: LayerNorm | None = None):
    """Strided conv embedding followed by flattening to ``(B, N, C)`` tokens."""
    if x.ndim == 3:
        x = ops.reshape(x, (1, *x.shape))
    fmap = proj(x)
    B, C, H1, W1 = fmap.shape
    seq = ops.reshape(ops.transpose(fmap, (0, 2, 3, 1)), (B, H1 * W1, C))
    if norm is not None:
        seq = norm(seq)
    return seq, (H1, W1)


class Stage(Module):
    def __init__(self, rng, c_in: int, cfg: StageConfig):
        self.cfg = cfg
        self.embed = PatchMerge(rng, c_in, cfg)
        self.blocks = [TransformerBlock(rng, cfg) for _ in range(cfg.L)]
        self.norm = LayerNorm(cfg.C)

    def forward(self, x: Tensor) -> Tensor:
        seq, (H, W) = self.embed(x)
        N = H * W
        if N % self.cfg.R:
            raise ConfigurationError(
                f"stage with R={self.cfg.R} got {H}x{W}={N} tokens; R must divide N")
        for block in self.blocks:
            seq = block(seq, (H, W))
        seq = self.norm(seq)
        B = seq.shape[0]
        return ops.transpose(ops.reshape(seq, (B, H, W, self.cfg.C)), (0, 3, 1, 2))


def stage_shapes(H: int, W: int, stages) -> list[tuple[int, int, int]]:
    """(H_i, W_i, C_i) of every stage output by recursive patch-merge arithmetic."""
    shapes = []
    for cfg in stages:
        H, W = cfg.output_size(H), cfg.output_size(W)
        shapes.append((H, W, cfg.C))
    return shapes


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, stages=PAPER_STAGES, in_channels: int = 15):
        self.in_channels = in_channels
        c_in = in_channels
        self.stages = []
        for cfg in stages:
            self.stages.append(Stage(rng, c_in, cfg))
            c_in = cfg.C

    @property
    def configs(self) -> tuple[StageConfig, ...]:
        return tuple(s.cfg for s in self.stages)

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.ndim == 3:
            x = ops.reshape(x, (1, *x.shape))
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            layout = ", ".join(f"{a}[RGB]" for a in ATTRIBUTE_LAYOUT)
            raise DimensionError(
                f"encoder expects (B, {self.in_channels}, H, W) input "
                f"({layout if self.in_channels == 15 else 'grayscale attributes'}); got {x.shape}")
        H, W = x.shape[-2:]
        if H % 32 or W % 32:
            raise ConfigurationError(f"input spatial size {H}x{W} must be divisible by 32")
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features
