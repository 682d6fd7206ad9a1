"""Finite-difference verification of every backward rule.

Each named check builds a fresh random instance (inputs and parameters
drawn uniformly from [-1, 1]), computes tape gradients of a scalar
probe loss, and compares them against central differences.  The reported
figure is the relative error

    max|a - n| / (max|a| + max|n| + tiny)

with the maxima taken over ALL checked coordinates of the instance, so
the worst deviation is normalized by the gradient scale of the whole
check.  (Per-tensor normalization would explode on parameters whose true
gradient is exactly zero, e.g. the key bias, where finite differences
return pure roundoff noise.)  Primitive and block checks compare every
coordinate; the toy end-to-end check covers every parameter tensor of
the two-level model but caps the coordinates sampled per tensor, while
the micro end-to-end check is exhaustive over all parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import (
    AttentionConfig,
    EfficientSelfAttention,
    MixFfn,
    MixFfnConfig,
    PatchEmbed,
    PatchEmbedConfig,
    TransformerBlock,
)
from .fusion import Fusion
from .model import AggPose, aggpose_micro, aggpose_t
from .tensor import Tape, Tensor, no_grad
from .train import heatmap_loss

BLOCK_TOL = 1e-5
END_TO_END_TOL = 1e-4
DEFAULT_SEEDS = 10
FD_EPS = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.abs(analytic).max(initial=0.0) + np.abs(numeric).max(initial=0.0) + 1e-12
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(build_loss, tensors, eps=FD_EPS, coord_cap=None, rng=None) -> float:
    """Relative error between tape gradients and central differences over
    the given tensors.  ``build_loss`` must be a pure function of the
    tensors' current data."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    diff_max = 0.0
    scale = 0.0
    with no_grad():
        for t, full in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            n = flat.size
            if coord_cap is not None and n > coord_cap:
                coords = np.sort(rng.choice(n, size=coord_cap, replace=False))
            else:
                coords = np.arange(n)
            numeric = np.zeros(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + eps
                up = build_loss().item()
                flat[c] = orig - eps
                down = build_loss().item()
                flat[c] = orig
                numeric[j] = (up - down) / (2.0 * eps)
            ana = full.reshape(-1)[coords]
            diff_max = max(diff_max, float(np.abs(ana - numeric).max(initial=0.0)))
            scale = max(
                scale,
                float(np.abs(ana).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)),
            )
    return diff_max / (scale + 1e-12)


def _uniform(rng, shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _project(out: Tensor, probe: Tensor) -> Tensor:
    return ops.sum_all(ops.mul(out, probe))


def _randomize(module, rng) -> list:
    params = [p for _, p in module.named_parameters()]
    for p in params:
        p.data = rng.uniform(-1.0, 1.0, size=p.shape)
    return params


# --- per-primitive checks ---------------------------------------------------


def _check_matmul(seed):
    rng = np.random.default_rng([seed, 101])
    a, b = _uniform(rng, (3, 4)), _uniform(rng, (4, 2))
    r = _uniform(rng, (3, 2))
    worst = check_gradients(lambda: _project(ops.matmul(a, b), r), [a, b])
    ab, bb = _uniform(rng, (2, 2, 3, 4)), _uniform(rng, (2, 2, 4, 5))
    rb = _uniform(rng, (2, 2, 3, 5))
    return max(worst, check_gradients(lambda: _project(ops.matmul(ab, bb), rb), [ab, bb]))


def _check_softmax(seed):
    rng = np.random.default_rng([seed, 111])
    x = _uniform(rng, (4, 7))
    r = _uniform(rng, (4, 7))
    return check_gradients(lambda: _project(ops.softmax_lastaxis(x), r), [x])


def _check_gelu(seed):
    rng = np.random.default_rng([seed, 121])
    x = _uniform(rng, (3, 6))
    r = _uniform(rng, (3, 6))
    return check_gradients(lambda: _project(ops.gelu(x), r), [x])


def _check_layernorm(seed):
    rng = np.random.default_rng([seed, 131])
    x, g, b = _uniform(rng, (5, 6)), _uniform(rng, (6,)), _uniform(rng, (6,))
    r = _uniform(rng, (5, 6))
    return check_gradients(lambda: _project(ops.layer_norm(x, g, b), r), [x, g, b])


def _check_dwconv(seed):
    rng = np.random.default_rng([seed, 141])
    x, w, b = _uniform(rng, (2, 3, 5, 4)), _uniform(rng, (3, 3, 3)), _uniform(rng, (3,))
    r = _uniform(rng, (2, 3, 5, 4))
    return check_gradients(lambda: _project(ops.depthwise_conv3x3(x, w, b), r), [x, w, b])


def _check_upsample(seed):
    rng = np.random.default_rng([seed, 151])
    x = _uniform(rng, (2, 3, 3, 4))
    r = _uniform(rng, (2, 3, 6, 8))
    return check_gradients(lambda: _project(ops.bilinear_upsample(x, 2), r), [x])


def _check_conv2d(seed):
    rng = np.random.default_rng([seed, 161])
    x, w, b = _uniform(rng, (2, 3, 6, 5)), _uniform(rng, (4, 3, 3, 3)), _uniform(rng, (4,))
    r = _uniform(rng, (2, 4, 3, 3))
    return check_gradients(lambda: _project(ops.conv2d(x, w, b, 2, 1), r), [x, w, b])


def _check_loss(seed):
    rng = np.random.default_rng([seed, 171])
    pred, target = _uniform(rng, (2, 3, 4, 4)), _uniform(rng, (2, 3, 4, 4))
    weight = Tensor((rng.random((2, 3)) > 0.3).astype(np.float64))
    return check_gradients(lambda: ops.masked_mse(pred, target, weight), [pred, target])


# --- block checks ------------------------------------------------------------


def _check_patch_embed(seed):
    rng = np.random.default_rng([seed, 201])
    embed = PatchEmbed(PatchEmbedConfig(7, 4, 3, 3, 5), rng, dtype=np.float64)
    params = _randomize(embed, rng)
    x = _uniform(rng, (2, 3, 16, 12))
    r = _uniform(rng, (2, 5, 4, 3))
    return check_gradients(lambda: _project(embed(x), r), [x] + params)


def _check_attention(seed):
    rng = np.random.default_rng([seed, 211])
    attn = EfficientSelfAttention(AttentionConfig(8, 2, 4), rng, dtype=np.float64)
    params = _randomize(attn, rng)
    x = _uniform(rng, (2, 16, 8))
    r = _uniform(rng, (2, 16, 8))
    return check_gradients(lambda: _project(attn(x, (4, 4)), r), [x] + params)


def _check_mix_ffn(seed):
    rng = np.random.default_rng([seed, 221])
    ffn = MixFfn(6, 6, 2, rng, dtype=np.float64)
    params = _randomize(ffn, rng)
    x = _uniform(rng, (2, 12, 6))
    r = _uniform(rng, (2, 12, 6))
    return check_gradients(lambda: _project(ffn(x, (4, 3)), r), [x] + params)


def _check_transformer_block(seed):
    rng = np.random.default_rng([seed, 231])
    block = TransformerBlock(AttentionConfig(8, 2, 4), MixFfnConfig(8, 2), rng, dtype=np.float64)
    params = _randomize(block, rng)
    x = _uniform(rng, (2, 16, 8))
    r = _uniform(rng, (2, 16, 8))
    return check_gradients(lambda: _project(block(x, (4, 4)), r), [x] + params)


def _fusion_fixture(seed):
    rng = np.random.default_rng([seed, 241])
    fusion = Fusion((4, 8), (2, 2), rng, dtype=np.float64)
    params = _randomize(fusion, rng)
    levels = [_uniform(rng, (2, 4, 4, 4)), _uniform(rng, (2, 8, 2, 2))]
    return fusion, params, levels, rng


def _check_route(seed):
    fusion, params, levels, rng = _fusion_fixture(seed)
    r_down = _uniform(rng, (2, 8, 2, 2))
    r_up = _uniform(rng, (2, 4, 4, 4))

    def build():
        down = _project(fusion.route(levels, 0, 1), r_down)
        up = _project(fusion.route(levels, 1, 0), r_up)
        return ops.add(down, up)

    return check_gradients(build, levels + params)


def _check_fuse(seed):
    fusion, params, levels, rng = _fusion_fixture(seed)
    r0 = _uniform(rng, (2, 4, 4, 4))
    r1 = _uniform(rng, (2, 8, 2, 2))

    def build():
        fused = fusion.fuse_all(levels)
        return ops.add(_project(fused[0], r0), _project(fused[1], r1))

    return check_gradients(build, levels + params)


def _check_head(seed):
    rng = np.random.default_rng([seed, 261])
    x = _uniform(rng, (2, 12, 6))
    g, b = _uniform(rng, (6,)), _uniform(rng, (6,))
    w1, b1 = _uniform(rng, (6, 8)), _uniform(rng, (8,))
    w2, b2 = _uniform(rng, (8, 4)), _uniform(rng, (4,))
    r = _uniform(rng, (2, 12, 4))

    def build():
        hidden = ops.gelu(ops.linear(ops.layer_norm(x, g, b), w1, b1))
        return _project(ops.linear(hidden, w2, b2), r)

    return check_gradients(build, [x, g, b, w1, b1, w2, b2])


# --- end to end ---------------------------------------------------------------


def _end_to_end(seed, cfg, coord_cap):
    model = AggPose(cfg, init_seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 301])
    params = [p for _, p in model.named_parameters()]
    for p in params:
        p.data = rng.uniform(-0.5, 0.5, size=p.shape)
    h, w = cfg.input_size
    images = Tensor(rng.uniform(-1.0, 1.0, size=(1, 3, h, w)))
    targets = Tensor(rng.uniform(0.0, 1.0, size=(1, cfg.num_keypoints, h // 4, w // 4)))
    weights = Tensor((rng.random((1, cfg.num_keypoints)) > 0.2).astype(np.float64))

    def build():
        return heatmap_loss(model(images), targets, weights)

    cap_rng = np.random.default_rng([seed, 302])
    return check_gradients(build, params, coord_cap=coord_cap, rng=cap_rng)


def _check_end_to_end(seed):
    micro = _end_to_end(seed, aggpose_micro(), coord_cap=None)
    toy = _end_to_end(seed, aggpose_t(num_keypoints=6, input_size=(64, 48)), coord_cap=12)
    return max(micro, toy)


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


CHECKS = {
    "matmul": (_check_matmul, BLOCK_TOL),
    "softmax": (_check_softmax, BLOCK_TOL),
    "gelu": (_check_gelu, BLOCK_TOL),
    "layernorm": (_check_layernorm, BLOCK_TOL),
    "dwconv": (_check_dwconv, BLOCK_TOL),
    "upsample": (_check_upsample, BLOCK_TOL),
    "conv2d": (_check_conv2d, BLOCK_TOL),
    "loss": (_check_loss, BLOCK_TOL),
    "patch_embed": (_check_patch_embed, BLOCK_TOL),
    "attention": (_check_attention, BLOCK_TOL),
    "mix_ffn": (_check_mix_ffn, BLOCK_TOL),
    "transformer_block": (_check_transformer_block, BLOCK_TOL),
    "route": (_check_route, BLOCK_TOL),
    "fuse": (_check_fuse, BLOCK_TOL),
    "head": (_check_head, BLOCK_TOL),
    "end_to_end": (_check_end_to_end, END_TO_END_TOL),
}

# the expensive end-to-end check runs fewer seeds
SEED_OVERRIDES = {"end_to_end": 2}


def available_checks():
    return list(CHECKS) + ["all"]


def run_checks(scope: str = "all", seeds: int = DEFAULT_SEEDS):
    """Run one named check or all of them; returns CheckResult rows."""
    if scope == "all":
        names = list(CHECKS)
    elif scope in CHECKS:
        names = [scope]
    else:
        raise KeyError(scope)
    results = []
    for name in names:
        fn, tol = CHECKS[name]
        n_seeds = min(seeds, SEED_OVERRIDES.get(name, seeds))
        t0 = time.perf_counter()
        worst = max(fn(seed) for seed in range(n_seeds))
        results.append(
            CheckResult(
                name=name,
                worst=worst,
                tolerance=tol,
                seeds=n_seeds,
                seconds=time.perf_counter() - t0,
            )
        )
    return results


def format_results(results) -> str:
    lines = ["check\tworst_rel_err\ttolerance\tseeds\tseconds\tstatus"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(
            f"{r.name}\t{r.worst:.3e}\t{r.tolerance:.0e}\t{r.seeds}\t{r.seconds:.2f}\t{status}"
        )
    return "\n".join(lines) + "\n"
