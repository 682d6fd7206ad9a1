"""Architectural primitives: overlapped patch embedding, sequence-reduction
self-attention, Mix-FFN, and their composition into a pre-norm transformer
block.

Attention compresses keys and values by grouping spatially contiguous
r x r tiles of the token grid (r*r = gamma, row-major order) into single
tokens of width gamma*C before a linear projection back to C.  Queries
stay at full length, so the attention matrix is N x (N/gamma).

Mix-FFN routes tokens through a 3x3 depthwise convolution on the grid
between its two pointwise projections; that convolution is the only
source of positional information in the network (no positional
embeddings anywhere).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .module import Module, ones_param, trunc_normal, zeros_param
from .tensor import Tensor


@dataclass(frozen=True)
class PatchEmbedConfig:
    kernel: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel <= 0 or self.stride <= 0 or self.padding < 0:
            raise ConfigError(f"invalid patch embed geometry {self}")

    def out_size(self, size: tuple) -> tuple:
        h = ops.conv_out_size(size[0], self.kernel, self.stride, self.padding)
        w = ops.conv_out_size(size[1], self.kernel, self.stride, self.padding)
        return (h, w)


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int
    reduction: int  # token-count divisor gamma; must be a square

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        r = math.isqrt(self.reduction)
        if r * r != self.reduction or r < 1:
            raise ConfigError(f"reduction {self.reduction} is not a square")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def tile(self) -> int:
        return math.isqrt(self.reduction)


@dataclass(frozen=True)
class MixFfnConfig:
    channels: int
    expansion: int

    def __post_init__(self):
        if self.expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {self.expansion}")


class PatchEmbed(Module):
    """Overlapped patch embedding: strided dense convolution (kernel >
    stride overlaps patches) followed by layer norm over channels."""

    def __init__(self, cfg: PatchEmbedConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        k, ci, co = cfg.kernel, cfg.in_channels, cfg.out_channels
        self.weight = trunc_normal(rng, (co, ci, k, k), dtype=dtype)
        self.bias = zeros_param((co,), dtype=dtype)
        self.norm_scale = ones_param((co,), dtype=dtype)
        self.norm_shift = zeros_param((co,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"embed expects {cfg.in_channels} channels, image has {x.shape}")
        y = ops.conv2d(x, self.weight, self.bias, cfg.stride, cfg.padding)
        grid = y.shape[2:]
        tokens = ops.layer_norm(ops.map_to_tokens(y), self.norm_scale, self.norm_shift)
        return ops.tokens_to_map(tokens, grid)


def reduce_tokens(x: Tensor, grid: tuple, tile: int) -> Tensor:
    """Group r x r spatial tiles (row-major) into single tokens of width
    r*r*C.  Identity when r == 1 apart from layout bookkeeping."""
    h, w = grid
    b, n, c = x.shape
    if n != h * w:
        raise ShapeError(f"token count {n} does not match grid {grid}")
    if h % tile or w % tile:
        raise ShapeError(f"grid {grid} not divisible by tile size {tile}")
    g = ops.reshape(x, (b, h // tile, tile, w // tile, tile, c))
    g = ops.transpose(g, (0, 1, 3, 2, 4, 5))
    return ops.reshape(g, (b, (h // tile) * (w // tile), tile * tile * c))


class EfficientSelfAttention(Module):
    """Multi-head self-attention with sequence-reduced keys and values.

    Keys and values come from one linear projection gamma*C -> C applied
    to the tile-grouped tokens; queries keep all N tokens.  Scores are
    scaled by 1/sqrt(head_dim) and softmaxed over the reduced axis.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c = cfg.channels
        rc = cfg.reduction * c
        self.q_weight = trunc_normal(rng, (c, c), dtype=dtype)
        self.q_bias = zeros_param((c,), dtype=dtype)
        self.k_weight = trunc_normal(rng, (rc, c), dtype=dtype)
        self.k_bias = zeros_param((c,), dtype=dtype)
        self.v_weight = trunc_normal(rng, (rc, c), dtype=dtype)
        self.v_bias = zeros_param((c,), dtype=dtype)
        self.out_weight = trunc_normal(rng, (c, c), dtype=dtype)
        self.out_bias = zeros_param((c,), dtype=dtype)

    def __call__(self, x: Tensor, grid: tuple) -> Tensor:
        cfg = self.cfg
        b, n, c = x.shape
        if c != cfg.channels:
            raise ShapeError(f"attention built for {cfg.channels} channels, got {x.shape}")
        if n % cfg.reduction:
            raise ShapeError(f"token count {n} not divisible by reduction {cfg.reduction}")
        h = cfg.heads
        d = cfg.head_dim

        reduced = reduce_tokens(x, grid, cfg.tile)
        m = reduced.shape[1]
        q = ops.linear(x, self.q_weight, self.q_bias)
        k = ops.linear(reduced, self.k_weight, self.k_bias)
        v = ops.linear(reduced, self.v_weight, self.v_bias)

        q = ops.transpose(ops.reshape(q, (b, n, h, d)), (0, 2, 1, 3))
        k = ops.transpose(ops.reshape(k, (b, m, h, d)), (0, 2, 1, 3))
        v = ops.transpose(ops.reshape(v, (b, m, h, d)), (0, 2, 1, 3))

        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
        scores = ops.scale(scores, 1.0 / math.sqrt(d))
        attn = ops.softmax_lastaxis(scores)
        mixed = ops.matmul(attn, v)
        mixed = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (b, n, c))
        return ops.linear(mixed, self.out_weight, self.out_bias)


class MixFfn(Module):
    """Pointwise expansion, 3x3 depthwise convolution on the grid, GELU,
    pointwise projection.  ``branch`` omits the residual so callers with a
    different stream tensor (blocks, fusion) can add their own; calling
    the module adds the input back and therefore requires in == out
    channels."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        expansion: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        if expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {expansion}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        hidden = expansion * out_channels
        self.hidden = hidden
        self.expand_weight = trunc_normal(rng, (in_channels, hidden), dtype=dtype)
        self.expand_bias = zeros_param((hidden,), dtype=dtype)
        self.dw_weight = trunc_normal(rng, (hidden, 3, 3), dtype=dtype)
        self.dw_bias = zeros_param((hidden,), dtype=dtype)
        self.project_weight = trunc_normal(rng, (hidden, out_channels), dtype=dtype)
        self.project_bias = zeros_param((out_channels,), dtype=dtype)

    def branch(self, x: Tensor, grid: tuple) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"mix-ffn expects width {self.in_channels}, got {x.shape}")
        y = ops.linear(x, self.expand_weight, self.expand_bias)
        y = ops.tokens_to_map(y, grid)
        y = ops.depthwise_conv3x3(y, self.dw_weight, self.dw_bias)
        y = ops.gelu(y)
        y = ops.map_to_tokens(y)
        return ops.linear(y, self.project_weight, self.project_bias)

    def __call__(self, x: Tensor, grid: tuple) -> Tensor:
        if self.in_channels != self.out_channels:
            raise ShapeError(
                f"residual mix-ffn needs equal widths, got {self.in_channels} -> {self.out_channels}"
            )
        return ops.add(self.branch(x, grid), x)


class TransformerBlock(Module):
    """Pre-norm block: x + Attn(LN(x)), then y + MixFfnBranch(LN(y)).

    The feed-forward half keeps a single residual (the stream value y,
    not its normalized copy), so zero-initialized branch weights make the
    whole block an exact identity.
    """

    def __init__(
        self,
        attn_cfg: AttentionConfig,
        ffn_cfg: MixFfnConfig,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        c = attn_cfg.channels
        if ffn_cfg.channels != c:
            raise ConfigError(f"attention width {c} differs from ffn width {ffn_cfg.channels}")
        self.norm1_scale = ones_param((c,), dtype=dtype)
        self.norm1_shift = zeros_param((c,), dtype=dtype)
        self.attn = EfficientSelfAttention(attn_cfg, rng, dtype=dtype)
        self.norm2_scale = ones_param((c,), dtype=dtype)
        self.norm2_shift = zeros_param((c,), dtype=dtype)
        self.ffn = MixFfn(c, c, ffn_cfg.expansion, rng, dtype=dtype)

    def __call__(self, x: Tensor, grid: tuple, timer=None) -> Tensor:
        t0 = time.perf_counter()
        y = ops.add(x, self.attn(ops.layer_norm(x, self.norm1_scale, self.norm1_shift), grid))
        t1 = time.perf_counter()
        z = ops.add(y, self.ffn.branch(ops.layer_norm(y, self.norm2_scale, self.norm2_shift), grid))
        if timer is not None:
            timer.add("attention", t1 - t0)
            timer.add("mix_ffn", time.perf_counter() - t1)
        return z
