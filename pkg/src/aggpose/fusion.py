"""Cross-resolution routing and fusion over a feature pyramid.

Each level j gathers its immediate neighbors: level j-1 is projected and
downsampled through a stride-2 overlapped patch embedding, level j+1 is
projected and bilinearly upsampled, level j passes through untouched.
The gathered maps are concatenated on the channel axis and a Mix-FFN
maps the concatenation back to level j's width; the original level-j map
is added back, so a zero-initialized fusion branch leaves the pyramid
unchanged.

All routes read pre-fusion inputs (synchronous exchange): the result does
not depend on the order levels are fused in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import MixFfn, PatchEmbed, PatchEmbedConfig
from .errors import ConfigError, ShapeError
from .module import Module, trunc_normal, zeros_param
from .tensor import Tensor


@dataclass
class PyramidFeatures:
    """Ordered per-resolution maps; level i is half the size of i-1."""

    levels: list

    def __post_init__(self):
        check_pyramid(self.levels)


def check_pyramid(levels, channels=None) -> None:
    if not levels:
        raise ShapeError("empty pyramid")
    prev = None
    for i, t in enumerate(levels):
        if t.ndim != 4:
            raise ShapeError(f"pyramid level {i} must be BxCxHxW, got {t.shape}")
        if channels is not None and t.shape[1] != channels[i]:
            raise ShapeError(
                f"pyramid level {i} has {t.shape[1]} channels, expected {channels[i]}"
            )
        if prev is not None:
            if t.shape[0] != prev.shape[0]:
                raise ShapeError("pyramid levels disagree on batch size")
            if prev.shape[2] != 2 * t.shape[2] or prev.shape[3] != 2 * t.shape[3]:
                raise ShapeError(
                    f"level {i} size {t.shape[2:]} is not half of level {i - 1} size {prev.shape[2:]}"
                )
        prev = t


class RouteProjection(Module):
    """Pointwise feed-forward used on every route: linear + GELU applied
    per spatial position."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype=np.float32):
        self.weight = trunc_normal(rng, (in_channels, out_channels), dtype=dtype)
        self.bias = zeros_param((out_channels,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        grid = x.shape[2:]
        tokens = ops.map_to_tokens(x)
        projected = ops.gelu(ops.linear(tokens, self.weight, self.bias))
        return ops.tokens_to_map(projected, grid)


class Fusion(Module):
    """One fusion exchange over adjacent pyramid levels.

    Built per stage; holds, for every target level j, the projections from
    j-1 and j+1 plus the fusing Mix-FFN over the concatenation.
    """

    def __init__(self, channels, expansion, rng, dtype=np.float32):
        if not channels:
            raise ConfigError("fusion needs at least one level")
        self.channels = tuple(channels)
        n = len(channels)
        self.down_projs = []  # route j-1 -> j, indexed by target j (None for j == 0)
        self.down_embeds = []
        self.up_projs = []  # route j+1 -> j, indexed by target j (None for j == n-1)
        self.fuse_ffns = []
        for j in range(n):
            if j > 0:
                self.down_projs.append(RouteProjection(channels[j - 1], channels[j], rng, dtype))
                embed_cfg = PatchEmbedConfig(3, 2, 1, channels[j], channels[j])
                self.down_embeds.append(PatchEmbed(embed_cfg, rng, dtype=dtype))
            else:
                self.down_projs.append(None)
                self.down_embeds.append(None)
            if j < n - 1:
                self.up_projs.append(RouteProjection(channels[j + 1], channels[j], rng, dtype))
            else:
                self.up_projs.append(None)
            arity = 1 + (j > 0) + (j < n - 1)
            exp = expansion[j] if isinstance(expansion, (list, tuple)) else expansion
            self.fuse_ffns.append(MixFfn(arity * channels[j], channels[j], exp, rng, dtype=dtype))

    def route(self, levels, i: int, j: int) -> Tensor:
        """Bring level i's map to level j's geometry; adjacent levels only."""
        if abs(i - j) > 1:
            raise ShapeError(f"route only connects adjacent levels, got {i} -> {j}")
        if not (0 <= i < len(levels) and 0 <= j < len(levels)):
            raise ShapeError(f"route {i} -> {j} outside pyramid of {len(levels)} levels")
        x = levels[i]
        if i == j:
            return x
        if i < j:
            out = self.down_embeds[j](self.down_projs[j](x))
        else:
            out = ops.bilinear_upsample(self.up_projs[j](x), 2)
        expect = levels[j].shape
        if out.shape != expect:
            raise ShapeError(f"route {i} -> {j} produced {out.shape}, expected {expect}")
        return out

    def fuse(self, levels, j: int) -> Tensor:
        """Concat the routed neighbors of level j, apply the fusing
        Mix-FFN, and add the original level-j map back."""
        check_pyramid(levels, self.channels[: len(levels)])
        neighbors = [self.route(levels, i, j) for i in (j - 1, j, j + 1) if 0 <= i < len(levels)]
        stacked = neighbors[0] if len(neighbors) == 1 else ops.concat(neighbors, axis=1)
        grid = levels[j].shape[2:]
        tokens = ops.map_to_tokens(stacked)
        fused = self.fuse_ffns[j].branch(tokens, grid)
        return ops.add(ops.tokens_to_map(fused, grid), levels[j])

    def fuse_all(self, levels) -> list:
        """Fuse every level against the same pre-fusion inputs."""
        return [self.fuse(levels, j) for j in range(len(levels))]
