"""Instance cropping, augmentation, and the affine machinery behind both.

Every crop stores its forward 2x3 affine and the exact inverse, so
predictions made in crop space map back to original pixels to within
numerical noise.  Augmentation (flip, rotation, scale) composes into the
same affine; the horizontal flip additionally swaps paired keypoint
labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .schemas import AnnotationRecord, KeypointSchema

# Per-channel statistics of the usual large natural-image corpus.
DEFAULT_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float64)
DEFAULT_STD = np.array([0.229, 0.224, 0.225], dtype=np.float64)


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rot_max_deg: float = 40.0
    scale_range: tuple = (0.65, 1.35)


@dataclass
class InstanceSample:
    image: np.ndarray  # 3 x H x W float32, normalized
    keypoints: np.ndarray  # (K, 3) in crop pixels
    affine: np.ndarray  # 2x3, original -> crop
    affine_inv: np.ndarray  # 2x3, crop -> original
    image_id: int
    ann_id: int
    bbox: tuple
    area: float
    flipped: bool


def invert_affine(a: np.ndarray) -> np.ndarray:
    m = np.vstack([a, [0.0, 0.0, 1.0]])
    return np.linalg.inv(m)[:2]


def apply_affine(points: np.ndarray, a: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ a[:, :2].T + a[:, 2]


def build_crop_affine(bbox, out_size, rot_deg=0.0, scale=1.0, flip=False) -> np.ndarray:
    """Affine (original px -> crop px) that centers the bbox, pads it to
    the output aspect ratio, applies the zoom/rotation/flip, and maps the
    result onto an out_size = (H, W) canvas."""
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise DataError(f"degenerate bbox {bbox}")
    out_h, out_w = out_size
    cx, cy = x + w / 2.0, y + h / 2.0
    aspect = out_w / out_h
    if w / h > aspect:
        src_w, src_h = w, w / aspect
    else:
        src_w, src_h = h * aspect, h
    src_w *= scale
    src_h *= scale

    theta = np.deg2rad(rot_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # translate center to origin, rotate, scale to canvas, translate to canvas center
    t1 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    r = np.array([[cos_t, -sin_t, 0], [sin_t, cos_t, 0], [0, 0, 1.0]])
    s = np.array([[out_w / src_w, 0, 0], [0, out_h / src_h, 0], [0, 0, 1.0]])
    t2 = np.array([[1, 0, out_w / 2.0], [0, 1, out_h / 2.0], [0, 0, 1.0]])
    m = t2 @ s @ r @ t1
    if flip:
        f = np.array([[-1, 0, out_w - 1.0], [0, 1, 0], [0, 0, 1.0]])
        m = f @ m
    return m[:2]


def warp_affine(image: np.ndarray, a: np.ndarray, out_size) -> np.ndarray:
    """Bilinear warp of an HxWxC image under the original->crop affine;
    samples outside the source are zero."""
    out_h, out_w = out_size
    inv = invert_affine(a)
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = apply_affine(coords, inv)
    sx, sy = src[:, 0], src[:, 1]
    h, w = image.shape[:2]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    img = image.astype(np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    out = np.zeros((out_h * out_w, img.shape[2]))
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            if inside.any():
                out[inside] += weight[inside, None] * img[yi[inside], xi[inside]]
    return out.reshape(out_h, out_w, img.shape[2])


def normalize_image(crop: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    """HxWx3 raster in [0, 255] -> normalized 3xHxW float32."""
    scaled = crop / 255.0
    normed = (scaled - mean) / std
    return np.ascontiguousarray(normed.transpose(2, 0, 1).astype(np.float32))


def crop_instance(
    image: np.ndarray,
    ann: AnnotationRecord,
    out_size,
    schema: KeypointSchema,
    rot_deg: float = 0.0,
    scale: float = 1.0,
    flip: bool = False,
    mean=DEFAULT_MEAN,
    std=DEFAULT_STD,
) -> InstanceSample:
    """Aspect-preserving affine crop of one annotated instance."""
    affine = build_crop_affine(ann.bbox, out_size, rot_deg=rot_deg, scale=scale, flip=flip)
    crop = warp_affine(image, affine, out_size)
    kps = ann.keypoints.copy()
    kps[:, :2] = apply_affine(kps[:, :2], affine)
    if flip:
        for a, b in schema.flip_pairs:
            kps[[a, b]] = kps[[b, a]]
    return InstanceSample(
        image=normalize_image(crop, mean, std),
        keypoints=kps,
        affine=affine,
        affine_inv=invert_affine(affine),
        image_id=ann.image_id,
        ann_id=ann.id,
        bbox=ann.bbox,
        area=ann.area,
        flipped=flip,
    )


def augment_params(rng: np.random.Generator, cfg: AugmentConfig):
    """Draw (rot_deg, scale, flip); seed-deterministic via the generator."""
    flip = bool(rng.random() < cfg.flip_prob)
    rot = float(rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg))
    scale = float(rng.uniform(*cfg.scale_range))
    return rot, scale, flip


def crop_with_augment(image, ann, out_size, schema, rng, cfg: AugmentConfig | None):
    if cfg is None:
        return crop_instance(image, ann, out_size, schema)
    rot, scale, flip = augment_params(rng, cfg)
    return crop_instance(image, ann, out_size, schema, rot_deg=rot, scale=scale, flip=flip)


def detection_from_crop(sample: InstanceSample, xy_crop: np.ndarray, scores: np.ndarray):
    """Map decoded crop-space keypoints back to original pixels."""
    xy = apply_affine(xy_crop, sample.affine_inv)
    kps = np.concatenate([xy, scores[:, None]], axis=1)
    return kps
