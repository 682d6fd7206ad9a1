"""Multi-resolution aggregation transformer for heatmap regression.

The network keeps a pyramid of streams at 1/4, 1/8, 1/16 and 1/32 of the
input resolution.  Stage s runs transformer blocks on the streams that
exist so far, then (through stage L-1) spawns the next, coarser stream
from the current lowest one via a stride-2 overlapped patch embedding,
and finally exchanges information across all streams with a fusion pass.
A layer-norm + pointwise projection head reads the final quarter-scale
stream into one unnormalized heatmap per keypoint.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import (
    AttentionConfig,
    MixFfnConfig,
    PatchEmbed,
    PatchEmbedConfig,
    TransformerBlock,
)
from .errors import ConfigError, ShapeError
from .fusion import Fusion, check_pyramid
from .module import Module, ones_param, trunc_normal, zeros_param
from .tensor import Tensor

CONFIG_KEYS = (
    "variant",
    "channels",
    "depths",
    "heads",
    "gamma",
    "expansion",
    "num_keypoints",
    "input_size",
)


@dataclass(frozen=True)
class StageSpec:
    """Block counts for the levels active in one stage (level 1..s)."""

    depths: tuple

    def __post_init__(self):
        if not self.depths or any(d < 1 for d in self.depths):
            raise ConfigError(f"stage depths must all be >= 1, got {self.depths}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    channels: tuple
    depths: tuple  # per level: block counts for the stages that level is active in
    heads: tuple
    gamma: tuple
    expansion: tuple
    num_keypoints: int
    input_size: tuple  # (H, W)

    def __post_init__(self):
        levels = len(self.channels)
        if levels < 1:
            raise ConfigError("need at least one level")
        if any(c2 <= c1 for c1, c2 in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channels must be strictly increasing, got {self.channels}")
        for name in ("depths", "heads", "gamma", "expansion"):
            if len(getattr(self, name)) != levels:
                raise ConfigError(f"{name} must list one entry per level")
        for lv, row in enumerate(self.depths):
            if len(row) != levels - lv:
                raise ConfigError(
                    f"level {lv + 1} must define depths for stages {lv + 1}..{levels}, got {row}"
                )
        if self.num_keypoints < 1:
            raise ConfigError("num_keypoints must be >= 1")
        h, w = self.input_size
        base = 4 * 2 ** (levels - 1)
        if h % base or w % base:
            raise ConfigError(f"input size {self.input_size} must be divisible by {base}")
        for lv in range(levels):
            AttentionConfig(self.channels[lv], self.heads[lv], self.gamma[lv])
            gh, gw = self.level_grid(lv)
            tile = int(np.sqrt(self.gamma[lv]))
            if gh % tile or gw % tile:
                raise ConfigError(
                    f"level {lv + 1} grid {gh}x{gw} not divisible by attention tile {tile}"
                )

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    def level_grid(self, level_index: int) -> tuple:
        f = 4 * 2**level_index
        return (self.input_size[0] // f, self.input_size[1] // f)

    def stage_specs(self) -> list:
        """Depth table reorganized per stage: stage s covers levels 1..s."""
        stages = []
        for s in range(self.num_levels):
            stages.append(StageSpec(tuple(self.depths[lv][s - lv] for lv in range(s + 1))))
        return stages

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "channels": list(self.channels),
            "depths": [list(row) for row in self.depths],
            "heads": list(self.heads),
            "gamma": list(self.gamma),
            "expansion": list(self.expansion),
            "num_keypoints": self.num_keypoints,
            "input_size": list(self.input_size),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def config_from_dict(raw: dict) -> ModelConfig:
    missing = [k for k in CONFIG_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"config is missing keys {missing}")
    extra = [k for k in raw if k not in CONFIG_KEYS]
    if extra:
        raise ConfigError(f"config has unknown keys {extra}")
    return ModelConfig(
        variant=str(raw["variant"]),
        channels=tuple(raw["channels"]),
        depths=tuple(tuple(row) for row in raw["depths"]),
        heads=tuple(raw["heads"]),
        gamma=tuple(raw["gamma"]),
        expansion=tuple(raw["expansion"]),
        num_keypoints=int(raw["num_keypoints"]),
        input_size=tuple(raw["input_size"]),
    )


def load_config(path) -> ModelConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(cfg: ModelConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")


def aggpose_l(num_keypoints: int = 17, input_size=(256, 192)) -> ModelConfig:
    return ModelConfig(
        variant="aggpose_l",
        channels=(64, 128, 320, 512),
        depths=((3, 3, 3, 3), (6, 3, 3), (40, 3), (3,)),
        heads=(1, 2, 5, 8),
        gamma=(64, 16, 4, 1),
        expansion=(4, 4, 4, 4),
        num_keypoints=num_keypoints,
        input_size=tuple(input_size),
    )


def aggpose_s(num_keypoints: int = 17, input_size=(256, 192)) -> ModelConfig:
    return ModelConfig(
        variant="aggpose_s",
        channels=(32, 64, 160, 256),
        depths=((3, 3, 3, 3), (4, 3, 3), (6, 3), (3,)),
        heads=(1, 2, 5, 8),
        gamma=(64, 16, 4, 1),
        expansion=(4, 4, 4, 4),
        num_keypoints=num_keypoints,
        input_size=tuple(input_size),
    )


def aggpose_t(num_keypoints: int = 21, input_size=(64, 48)) -> ModelConfig:
    """Desk-scale toy: two levels, one block each per stage."""
    return ModelConfig(
        variant="aggpose_t",
        channels=(8, 16),
        depths=((1, 1), (1,)),
        heads=(1, 2),
        gamma=(4, 1),
        expansion=(4, 4),
        num_keypoints=num_keypoints,
        input_size=tuple(input_size),
    )


def aggpose_micro(num_keypoints: int = 2, input_size=(32, 32)) -> ModelConfig:
    """Smallest buildable variant; used for exhaustive finite-difference
    checking of every parameter."""
    return ModelConfig(
        variant="aggpose_micro",
        channels=(4, 8),
        depths=((1, 1), (1,)),
        heads=(1, 1),
        gamma=(4, 1),
        expansion=(1, 1),
        num_keypoints=num_keypoints,
        input_size=tuple(input_size),
    )


VARIANTS = {
    "aggpose_l": aggpose_l,
    "aggpose_s": aggpose_s,
    "aggpose_t": aggpose_t,
    "aggpose_micro": aggpose_micro,
}


class _NullTimer:
    def add(self, key, seconds):
        pass


NULL_TIMER = _NullTimer()


class Stage(Module):
    def __init__(self, cfg: ModelConfig, stage_index: int, rng, dtype):
        spec = cfg.stage_specs()[stage_index]
        self.level_blocks = []
        for lv, depth in enumerate(spec.depths):
            attn_cfg = AttentionConfig(cfg.channels[lv], cfg.heads[lv], cfg.gamma[lv])
            ffn_cfg = MixFfnConfig(cfg.channels[lv], cfg.expansion[lv])
            self.level_blocks.append(
                [TransformerBlock(attn_cfg, ffn_cfg, rng, dtype=dtype) for _ in range(depth)]
            )
        active_after = min(stage_index + 2, cfg.num_levels)
        if stage_index + 1 < cfg.num_levels:
            embed_cfg = PatchEmbedConfig(
                3, 2, 1, cfg.channels[stage_index], cfg.channels[stage_index + 1]
            )
            self.new_embed = PatchEmbed(embed_cfg, rng, dtype=dtype)
        else:
            self.new_embed = None
        self.fusion = Fusion(cfg.channels[:active_after], cfg.expansion[:active_after], rng, dtype)


class AggPose(Module):
    """The assembled network.  Construction is deterministic given the
    init seed; forward is deterministic given the input."""

    def __init__(self, cfg: ModelConfig, init_seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(init_seed)
        self.stem = PatchEmbed(
            PatchEmbedConfig(7, 4, 3, 3, cfg.channels[0]), rng, dtype=self.dtype
        )
        self.stages = [Stage(cfg, s, rng, self.dtype) for s in range(cfg.num_levels)]
        c1 = cfg.channels[0]
        # pointwise two-layer head on the quarter-scale stream; a single
        # linear from c1 channels caps the per-position output at rank c1,
        # which provably cannot place num_keypoints > c1 sharp peaks
        hidden = cfg.expansion[0] * c1
        self.head_norm_scale = ones_param((c1,), dtype=self.dtype)
        self.head_norm_shift = zeros_param((c1,), dtype=self.dtype)
        self.head_expand_weight = trunc_normal(rng, (c1, hidden), dtype=self.dtype)
        self.head_expand_bias = zeros_param((hidden,), dtype=self.dtype)
        # final head layer starts at zero so an untrained model emits flat maps
        self.head_weight = zeros_param((hidden, cfg.num_keypoints), dtype=self.dtype)
        self.head_bias = zeros_param((cfg.num_keypoints,), dtype=self.dtype)

    def forward(self, images: Tensor, timer=None) -> Tensor:
        timer = timer or NULL_TIMER
        cfg = self.cfg
        expect = (3,) + tuple(cfg.input_size)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise ShapeError(f"model expects Bx{expect} images, got {images.shape}")
        if images.dtype != self.dtype:
            raise ShapeError(f"model runs {self.dtype} but images are {images.dtype}")

        t0 = time.perf_counter()
        levels = [self.stem(images)]
        timer.add("patch_embed", time.perf_counter() - t0)

        for stage in self.stages:
            for lv, blocks in enumerate(stage.level_blocks):
                grid = levels[lv].shape[2:]
                tokens = ops.map_to_tokens(levels[lv])
                for block in blocks:
                    tokens = block(tokens, grid, timer=timer)
                levels[lv] = ops.tokens_to_map(tokens, grid)
            if stage.new_embed is not None:
                t0 = time.perf_counter()
                levels.append(stage.new_embed(levels[-1]))
                timer.add("patch_embed", time.perf_counter() - t0)
            t0 = time.perf_counter()
            levels = stage.fusion.fuse_all(levels)
            timer.add("fusion", time.perf_counter() - t0)

        check_pyramid(levels, cfg.channels)
        t0 = time.perf_counter()
        grid = levels[0].shape[2:]
        tokens = ops.layer_norm(
            ops.map_to_tokens(levels[0]), self.head_norm_scale, self.head_norm_shift
        )
        hidden = ops.gelu(ops.linear(tokens, self.head_expand_weight, self.head_expand_bias))
        heatmaps = ops.tokens_to_map(ops.linear(hidden, self.head_weight, self.head_bias), grid)
        timer.add("head", time.perf_counter() - t0)
        return heatmaps

    __call__ = forward

    def pyramid(self, images: Tensor) -> list:
        """Forward through the body only; returns the final pyramid."""
        cfg = self.cfg
        levels = [self.stem(images)]
        for stage in self.stages:
            for lv, blocks in enumerate(stage.level_blocks):
                grid = levels[lv].shape[2:]
                tokens = ops.map_to_tokens(levels[lv])
                for block in blocks:
                    tokens = block(tokens, grid)
                levels[lv] = ops.tokens_to_map(tokens, grid)
            if stage.new_embed is not None:
                levels.append(stage.new_embed(levels[-1]))
            levels = stage.fusion.fuse_all(levels)
        check_pyramid(levels, cfg.channels)
        return levels

    # -- parameter bookkeeping -------------------------------------------

    def param_levels(self) -> dict:
        """Map parameter name -> owning resolution level (1-based); 0 for
        the head, which no level-freeze policy touches."""
        tags = {}
        for name, _ in self.named_parameters():
            parts = name.split(".")
            if parts[0] == "stem":
                tags[name] = 1
            elif parts[0] == "stages":
                stage_index = int(parts[1])
                kind = parts[2]
                if kind == "level_blocks":
                    tags[name] = int(parts[3]) + 1
                elif kind == "new_embed":
                    tags[name] = stage_index + 2
                elif kind == "fusion":
                    tags[name] = int(parts[4]) + 1
                else:
                    raise ConfigError(f"unrecognized parameter {name}")
            else:
                tags[name] = 0
        return tags

    def freeze_levels(self, levels) -> list:
        """Mark the named levels' parameters non-trainable; returns the
        affected parameter names."""
        levels = set(levels)
        tags = self.param_levels()
        touched = []
        for name, p in self.named_parameters():
            if tags[name] in levels:
                p.trainable = False
                touched.append(name)
        return touched

    def unfreeze_all(self) -> None:
        for p in self.parameters():
            p.trainable = True

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}
