"""Reading and writing keypoint datasets in the standard COCO JSON layout.

Loaders validate against a schema (keypoint count, visibility flags,
coordinate bounds) and never mutate the files they read.  Validation
failures name the offending record id.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, SchemaError
from .schemas import AnnotationRecord, DetectionRecord, KeypointSchema

log = logging.getLogger(__name__)

BBOX_AREA_FACTOR = 0.53  # stand-in for segment area when none is given


@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


def load_coco_keypoints(path, schema: KeypointSchema):
    """Parse an annotation file; returns (records, image index).

    Coordinates of annotated keypoints are clipped into image bounds with
    a warning.  A keypoint count that does not match the schema is an
    error, so a 21-point file will not load under a 17-point schema.
    """
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot parse annotation file {path}: {e}") from e
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise DataError(f"annotation file {path} is missing its '{key}' section")

    for cat in raw["categories"]:
        names = cat.get("keypoints", [])
        if len(names) != schema.num_keypoints:
            raise SchemaError(
                f"category {cat.get('name', cat.get('id'))} defines {len(names)} keypoints, "
                f"schema {schema.name} expects {schema.num_keypoints}"
            )

    images = {}
    for img in raw["images"]:
        info = ImageInfo(
            id=int(img["id"]),
            file_name=str(img["file_name"]),
            width=int(img["width"]),
            height=int(img["height"]),
        )
        images[info.id] = info

    records = []
    for ann in raw["annotations"]:
        ann_id = ann.get("id")
        kps = np.asarray(ann["keypoints"], dtype=np.float64)
        if kps.size != 3 * schema.num_keypoints:
            raise SchemaError(
                f"annotation {ann_id} carries {kps.size // 3} keypoints, "
                f"schema {schema.name} expects {schema.num_keypoints}"
            )
        kps = kps.reshape(-1, 3)
        bad_v = ~np.isin(kps[:, 2], (0, 1, 2))
        if bad_v.any():
            raise DataError(f"annotation {ann_id} has visibility flags outside {{0,1,2}}")
        image_id = int(ann["image_id"])
        if image_id not in images:
            raise DataError(f"annotation {ann_id} references unknown image {image_id}")
        info = images[image_id]
        labeled = kps[:, 2] > 0
        clipped_x = np.clip(kps[labeled, 0], 0, info.width - 1)
        clipped_y = np.clip(kps[labeled, 1], 0, info.height - 1)
        if (clipped_x != kps[labeled, 0]).any() or (clipped_y != kps[labeled, 1]).any():
            log.warning("annotation %s: keypoints outside image bounds were clipped", ann_id)
            kps[labeled, 0] = clipped_x
            kps[labeled, 1] = clipped_y
        bbox = tuple(float(v) for v in ann["bbox"])
        if "area" in ann and ann["area"] is not None:
            area = float(ann["area"])
        else:
            area = bbox[2] * bbox[3] * BBOX_AREA_FACTOR
        records.append(
            AnnotationRecord(
                id=int(ann_id), image_id=image_id, keypoints=kps, area=area, bbox=bbox
            )
        )
    return records, images


def write_coco_keypoints(path, images, records, schema: KeypointSchema, category_name: str):
    """Emit records in the same layout `load_coco_keypoints` reads."""
    doc = {
        "images": [
            {"id": i.id, "file_name": i.file_name, "width": i.width, "height": i.height}
            for i in images
        ],
        "annotations": [
            {
                "id": r.id,
                "image_id": r.image_id,
                "category_id": 1,
                "keypoints": [round(float(v), 4) for v in r.keypoints.reshape(-1)],
                "num_keypoints": int((r.keypoints[:, 2] > 0).sum()),
                "bbox": [round(float(v), 4) for v in r.bbox],
                "area": round(float(r.area), 4),
                "iscrowd": 0,
            }
            for r in records
        ],
        "categories": [
            {
                "id": 1,
                "name": category_name,
                "keypoints": list(schema.keypoint_names),
                "skeleton": [],
            }
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_detections(path, schema: KeypointSchema):
    """Read a results file: a JSON list of {image_id, keypoints, score}."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot parse detections file {path}: {e}") from e
    if not isinstance(raw, list):
        raise DataError(f"detections file {path} must hold a JSON list")
    dets = []
    for i, item in enumerate(raw):
        kps = np.asarray(item["keypoints"], dtype=np.float64)
        if kps.size != 3 * schema.num_keypoints:
            raise SchemaError(
                f"detection #{i} carries {kps.size // 3} keypoints, "
                f"schema {schema.name} expects {schema.num_keypoints}"
            )
        dets.append(
            DetectionRecord(
                image_id=int(item["image_id"]),
                keypoints=kps.reshape(-1, 3),
                score=float(item["score"]),
            )
        )
    return dets


def write_detections(path, dets):
    doc = [
        {
            "image_id": d.image_id,
            "category_id": 1,
            "keypoints": [round(float(v), 4) for v in d.keypoints.reshape(-1)],
            "score": round(float(d.score), 6),
        }
        for d in dets
    ]
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_gt_boxes(path):
    """Optional detector-box file: JSON list of {image_id, bbox, score}."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot parse box file {path}: {e}") from e
    boxes = []
    for item in raw:
        boxes.append(
            (int(item["image_id"]), tuple(float(v) for v in item["bbox"]), float(item.get("score", 1.0)))
        )
    return boxes
