"""Keypoints <-> Gaussian heatmaps.

Targets are unnormalized Gaussians (amplitude exactly 1.0 at the true
sub-cell center) on the quarter-resolution grid.  Decoding takes the
per-channel argmax (ties resolve to the lowest row-major index), shifts a
quarter cell toward the larger adjacent neighbor on each axis, and scales
back to input pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

V_UNLABELED = 0
V_INVISIBLE = 1
V_VISIBLE = 2


def encode(keypoints: np.ndarray, heatmap_size: tuple, sigma: float = 2.0, stride: int = 4):
    """Render one Gaussian target per keypoint.

    ``keypoints`` is (K, 3) in input pixels with visibility flags; returns
    (targets (K, H', W'), weights (K,)).  Unlabeled keypoints (v == 0) and
    keypoints whose nearest cell falls off the grid get a zero channel and
    zero weight.
    """
    if sigma <= 0:
        raise ShapeError(f"sigma must be positive, got {sigma}")
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.ndim != 2 or kps.shape[1] != 3:
        raise ShapeError(f"keypoints must be (K, 3), got {kps.shape}")
    h, w = heatmap_size
    targets = np.zeros((kps.shape[0], h, w), dtype=np.float64)
    weights = np.zeros(kps.shape[0], dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    for k, (x, y, v) in enumerate(kps):
        if v == V_UNLABELED:
            continue
        cx = x / stride
        cy = y / stride
        if not (-0.5 <= cx <= w - 0.5 and -0.5 <= cy <= h - 0.5):
            continue
        gx = np.exp(-((xs - cx) ** 2) / (2.0 * sigma * sigma))
        gy = np.exp(-((ys - cy) ** 2) / (2.0 * sigma * sigma))
        targets[k] = gy[:, None] * gx[None, :]
        weights[k] = 1.0
    return targets, weights


@dataclass
class DecodedKeypoints:
    xy: np.ndarray  # (K, 2) input pixels
    score: np.ndarray  # (K,) peak value
    degenerate: np.ndarray  # (K,) bool, flat channel


def decode(heatmaps: np.ndarray, stride: int = 4) -> DecodedKeypoints:
    """Sub-pixel decode of (K, H', W') heatmaps back to input pixels."""
    maps = np.asarray(heatmaps, dtype=np.float64)
    if maps.ndim != 3:
        raise ShapeError(f"decode expects (K, H, W), got {maps.shape}")
    if not np.isfinite(maps).all():
        raise NumericError("decode input contains NaN or Inf")
    k, h, w = maps.shape
    xy = np.zeros((k, 2), dtype=np.float64)
    score = np.zeros(k, dtype=np.float64)
    degenerate = np.zeros(k, dtype=bool)
    for i, m in enumerate(maps):
        flat = int(m.argmax())  # ties: lowest row-major index
        py, px = divmod(flat, w)
        peak = m[py, px]
        score[i] = peak
        if peak == m.min():
            degenerate[i] = True
            xy[i] = ((w - 1) / 2.0 * stride, (h - 1) / 2.0 * stride)
            continue
        fx, fy = float(px), float(py)
        if 0 < px < w - 1:
            fx += 0.25 * np.sign(m[py, px + 1] - m[py, px - 1])
        if 0 < py < h - 1:
            fy += 0.25 * np.sign(m[py + 1, px] - m[py - 1, px])
        xy[i] = (fx * stride, fy * stride)
    return DecodedKeypoints(xy=xy, score=score, degenerate=degenerate)


def decode_batch(heatmaps: np.ndarray, stride: int = 4):
    return [decode(m, stride=stride) for m in np.asarray(heatmaps)]
