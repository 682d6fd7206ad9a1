"""Keypoint schemas and the annotation/detection record types.

A schema fixes the keypoint count, the per-keypoint OKS falloff constants
k_i, and the horizontal-flip pairing.  Two schemas ship: the 17-point
standard person format and a 21-point infant format with a reduced head
and extra distal points (fingers, toes) plus torso landmarks.

The infant keypoint names and ordering are provisional: indices are
stable within this package but not an external standard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaError

# Published per-keypoint sigmas of the standard COCO keypoint evaluator;
# its OKS uses k_i = 2 * sigma_i.
COCO_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)

COCO17_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

INFANT21_NAMES = (
    "head", "neck", "chest", "navel", "pelvis",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_fingers", "right_fingers",
    "left_hip", "right_hip", "left_knee", "right_knee",
    "left_ankle", "right_ankle", "left_toes", "right_toes",
)


@dataclass(frozen=True)
class KeypointSchema:
    name: str
    keypoint_names: tuple
    k: tuple  # per-keypoint OKS constants
    flip_pairs: tuple  # (left_index, right_index) pairs

    def __post_init__(self):
        n = len(self.keypoint_names)
        if len(self.k) != n:
            raise SchemaError(f"schema {self.name}: {len(self.k)} constants for {n} keypoints")
        if any(v <= 0 for v in self.k):
            raise SchemaError(f"schema {self.name}: k constants must be positive")
        seen = set()
        for a, b in self.flip_pairs:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise SchemaError(f"schema {self.name}: bad flip pair ({a}, {b})")
            if a in seen or b in seen:
                raise SchemaError(f"schema {self.name}: flip pairs are not an involution")
            seen.add(a)
            seen.add(b)

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)

    def k_array(self) -> np.ndarray:
        return np.asarray(self.k, dtype=np.float64)


def coco17() -> KeypointSchema:
    return KeypointSchema(
        name="coco17",
        keypoint_names=COCO17_NAMES,
        k=tuple(2.0 * s for s in COCO_SIGMAS),
        flip_pairs=((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)),
    )


def infant21(k: float = 0.08) -> KeypointSchema:
    """Uniform falloff constant across all 21 keypoints (default 0.08)."""
    return KeypointSchema(
        name="infant21",
        keypoint_names=INFANT21_NAMES,
        k=(float(k),) * 21,
        flip_pairs=((5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16), (17, 18), (19, 20)),
    )


def schema_by_name(name: str, k: float = 0.08) -> KeypointSchema:
    if name == "coco17":
        return coco17()
    if name == "infant21":
        return infant21(k=k)
    raise SchemaError(f"unknown schema {name!r}; available: coco17, infant21")


@dataclass
class AnnotationRecord:
    """Ground-truth instance: keypoints plus the object scale that
    normalizes OKS distances."""

    id: int
    image_id: int
    keypoints: np.ndarray  # ( K, 3 ) float: x, y, visibility in {0, 1, 2}
    area: float  # px^2; object scale s = sqrt(area)
    bbox: tuple  # x, y, w, h

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.area))

    def num_visible(self) -> int:
        return int((self.keypoints[:, 2] > 0).sum())


@dataclass
class DetectionRecord:
    """Predicted instance; visibility column is present but every point is
    treated as predicted."""

    image_id: int
    keypoints: np.ndarray  # (K, 3) float: x, y, confidence
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise SchemaError(f"detection score must be finite, got {self.score}")
