"""Seed-deterministic articulated stick-figure datasets.

Each scene is a jittered skeleton (per-bone angle and length noise,
global scale and translation) rendered as anti-aliased capsule limbs and
joint discs over a gray noise background.  Keypoints are exact by
construction and always inside the image.  Output is a standard dataset
directory: images/ plus one annotation file.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .coco_io import ImageInfo, write_coco_keypoints
from .errors import SchemaError
from .schemas import AnnotationRecord, KeypointSchema

BBOX_PAD = 3.0
EDGE_MARGIN = 2.0

# bones: (parent, child, angle_deg, length); angle 0 points +x, 90 points +y (down)
# parent -1 is the root at the origin.
INFANT21_BONES = (
    (-1, 4, 0.0, 0.0),      # pelvis (root)
    (4, 3, -90.0, 0.50),    # navel
    (3, 2, -90.0, 0.50),    # chest
    (2, 1, -90.0, 0.40),    # neck
    (1, 0, -90.0, 0.45),    # head
    (1, 5, 170.0, 0.50),    # left shoulder
    (1, 6, 10.0, 0.50),     # right shoulder
    (5, 7, 150.0, 0.55),    # left elbow
    (6, 8, 30.0, 0.55),     # right elbow
    (7, 9, 120.0, 0.50),    # left wrist
    (8, 10, 60.0, 0.50),    # right wrist
    (9, 11, 110.0, 0.25),   # left fingers
    (10, 12, 70.0, 0.25),   # right fingers
    (4, 13, 160.0, 0.35),   # left hip
    (4, 14, 20.0, 0.35),    # right hip
    (13, 15, 110.0, 0.60),  # left knee
    (14, 16, 70.0, 0.60),   # right knee
    (15, 17, 95.0, 0.55),   # left ankle
    (16, 18, 85.0, 0.55),   # right ankle
    (17, 19, 100.0, 0.25),  # left toes
    (18, 20, 80.0, 0.25),   # right toes
)

COCO17_BONES = (
    (-1, 0, -90.0, 1.95),   # nose
    (0, 1, -130.0, 0.15),   # left eye
    (0, 2, -50.0, 0.15),    # right eye
    (0, 3, 175.0, 0.28),    # left ear
    (0, 4, 5.0, 0.28),      # right ear
    (-1, 5, -110.0, 1.60),  # left shoulder
    (-1, 6, -70.0, 1.60),   # right shoulder
    (5, 7, 140.0, 0.55),    # left elbow
    (6, 8, 40.0, 0.55),     # right elbow
    (7, 9, 110.0, 0.50),    # left wrist
    (8, 10, 70.0, 0.50),    # right wrist
    (-1, 11, 165.0, 0.32),  # left hip
    (-1, 12, 15.0, 0.32),   # right hip
    (11, 13, 105.0, 0.65),  # left knee
    (12, 14, 75.0, 0.65),   # right knee
    (13, 15, 95.0, 0.60),   # left ankle
    (14, 16, 85.0, 0.60),   # right ankle
)

SKELETONS = {"infant21": INFANT21_BONES, "coco17": COCO17_BONES}

def _palette(n: int, saturation: float, value: float, hue_offset: float = 0.0) -> np.ndarray:
    """n maximally spread hues; every limb/joint gets its own color so the
    figure parts stay visually distinguishable at desk-scale resolutions."""
    colors = [
        colorsys.hsv_to_rgb((i / n + hue_offset) % 1.0, saturation, value) for i in range(n)
    ]
    return np.asarray(colors, dtype=np.float64) * 255.0


BONE_PALETTE = _palette(21, saturation=0.85, value=0.90)
JOINT_PALETTE = _palette(21, saturation=0.95, value=0.45, hue_offset=0.5)


@dataclass
class SyntheticScene:
    keypoints: np.ndarray  # (K, 3) pixels + visibility
    bbox: tuple
    scale_px: float
    image: np.ndarray  # H x W x 3 uint8


def _skeleton_for(schema: KeypointSchema):
    bones = SKELETONS.get(schema.name)
    if bones is None:
        raise SchemaError(f"no synthetic skeleton for schema {schema.name!r}")
    return bones


def sample_scene(rng: np.random.Generator, schema: KeypointSchema, image_size) -> SyntheticScene:
    bones = _skeleton_for(schema)
    h, w = image_size
    pts = np.zeros((schema.num_keypoints, 2))
    for parent, child, angle, length in bones:
        jitter_angle = np.deg2rad(angle + rng.uniform(-18.0, 18.0))
        jitter_len = length * rng.uniform(0.85, 1.15)
        base = pts[parent] if parent >= 0 else np.zeros(2)
        pts[child] = base + jitter_len * np.array([np.cos(jitter_angle), np.sin(jitter_angle)])

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = np.maximum(hi - lo, 1e-6)
    fill = rng.uniform(0.72, 0.92)
    usable_w = w - 2 * EDGE_MARGIN
    usable_h = h - 2 * EDGE_MARGIN
    scale_px = fill * min(usable_w / extent[0], usable_h / extent[1])
    pts = (pts - (lo + hi) / 2.0) * scale_px

    slack_x = (usable_w - extent[0] * scale_px) / 2.0
    slack_y = (usable_h - extent[1] * scale_px) / 2.0
    cx = w / 2.0 + rng.uniform(-slack_x, slack_x)
    cy = h / 2.0 + rng.uniform(-slack_y, slack_y)
    pts += np.array([cx, cy])
    pts[:, 0] = np.clip(pts[:, 0], EDGE_MARGIN, w - 1 - EDGE_MARGIN)
    pts[:, 1] = np.clip(pts[:, 1], EDGE_MARGIN, h - 1 - EDGE_MARGIN)

    vis = np.full(schema.num_keypoints, 2.0)
    roll = rng.random(schema.num_keypoints)
    vis[roll < 0.06] = 1.0
    unlabeled = roll > 0.97
    unlabeled[0] = False  # keep at least one annotated keypoint
    vis[unlabeled] = 0.0
    kps = np.concatenate([pts, vis[:, None]], axis=1)
    kps[unlabeled, :2] = 0.0

    labeled = kps[kps[:, 2] > 0, :2]
    x0 = max(labeled[:, 0].min() - BBOX_PAD, 0.0)
    y0 = max(labeled[:, 1].min() - BBOX_PAD, 0.0)
    x1 = min(labeled[:, 0].max() + BBOX_PAD, w - 1.0)
    y1 = min(labeled[:, 1].max() + BBOX_PAD, h - 1.0)
    bbox = (x0, y0, x1 - x0, y1 - y0)

    image = render_scene(pts, kps[:, 2], bones, (h, w), scale_px, rng)
    return SyntheticScene(keypoints=kps, bbox=bbox, scale_px=scale_px, image=image)


def render_scene(pts, vis, bones, image_size, scale_px, rng) -> np.ndarray:
    h, w = image_size
    canvas = np.clip(rng.normal(112.0, 22.0, size=(h, w, 3)), 0, 255)
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([xs, ys], axis=-1).astype(np.float64)
    radius = max(0.05 * scale_px, 1.4)

    def paint(alpha, color):
        np.multiply(canvas, (1.0 - alpha)[:, :, None], out=canvas)
        np.add(canvas, alpha[:, :, None] * color[None, None, :], out=canvas)

    for bi, (parent, child, _, _) in enumerate(bones):
        if parent < 0:
            continue
        p, q = pts[parent], pts[child]
        seg = q - p
        seg_len2 = float(seg @ seg)
        rel = grid - p
        if seg_len2 < 1e-12:
            dist = np.linalg.norm(rel, axis=-1)
        else:
            t = np.clip((rel @ seg) / seg_len2, 0.0, 1.0)
            dist = np.linalg.norm(rel - t[:, :, None] * seg, axis=-1)
        alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        paint(alpha, BONE_PALETTE[bi % len(BONE_PALETTE)])

    for ki, p in enumerate(pts):
        if vis[ki] == 0:
            continue
        dist = np.linalg.norm(grid - p, axis=-1)
        alpha = np.clip(1.8 * radius + 0.5 - dist, 0.0, 1.0)
        paint(alpha, JOINT_PALETTE[ki % len(JOINT_PALETTE)])

    return np.clip(canvas, 0, 255).astype(np.uint8)


def generate_synthetic(out_dir, n: int, seed: int, image_size, schema: KeypointSchema):
    """Write n scenes under out_dir: images/img_NNNNNN.png plus
    annotations.json.  Bitwise deterministic per (seed, index)."""
    if n < 1:
        raise ValueError(f"need n >= 1 scenes, got {n}")
    _skeleton_for(schema)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    h, w = image_size
    infos, records = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        scene = sample_scene(rng, schema, image_size)
        file_name = f"img_{i:06d}.png"
        Image.fromarray(scene.image).save(os.path.join(images_dir, file_name))
        infos.append(ImageInfo(id=i + 1, file_name=file_name, width=w, height=h))
        records.append(
            AnnotationRecord(
                id=i + 1,
                image_id=i + 1,
                keypoints=scene.keypoints,
                area=0.53 * scene.bbox[2] * scene.bbox[3],
                bbox=scene.bbox,
            )
        )
    ann_path = os.path.join(out_dir, "annotations.json")
    write_coco_keypoints(ann_path, infos, records, schema, category_name=schema.name)
    return ann_path
