"""Object keypoint similarity and the AP/AR evaluation protocol.

OKS between a detection and an annotation is the mean, over annotated
keypoints (v > 0), of exp(-d_i^2 / (2 s^2 k_i^2)) where d_i is the pixel
distance, s = sqrt(object area) and k_i the schema falloff constant.
Annotations with no annotated keypoint have no OKS; they are excluded
from matching entirely.

Matching follows the standard greedy protocol: per image, detections in
descending score order each claim the unmatched annotation with the
highest OKS at or above the threshold.  Precision-recall is integrated
with 101-point interpolation per threshold; AP averages thresholds
0.50:0.05:0.95.  The medium/large splits restrict annotations by area
(ignored, not dropped, so detections matched to out-of-band annotations
are neither true nor false positives).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SchemaError
from .schemas import AnnotationRecord, DetectionRecord, KeypointSchema

OKS_THRESHOLDS = tuple(np.linspace(0.50, 0.95, 10))
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)

AREA_ALL = (0.0, 1e10)
AREA_MEDIUM = (32.0**2, 96.0**2)
AREA_LARGE = (96.0**2, 1e10)


def oks(det: DetectionRecord, ann: AnnotationRecord, schema: KeypointSchema):
    """Similarity in [0, 1], or None when the annotation has no annotated
    keypoint (undefined, deliberately not 0)."""
    k = schema.num_keypoints
    if det.keypoints.shape[0] != k or ann.keypoints.shape[0] != k:
        raise SchemaError(
            f"keypoint counts {det.keypoints.shape[0]}/{ann.keypoints.shape[0]} "
            f"do not match schema {schema.name} ({k})"
        )
    vis = ann.keypoints[:, 2] > 0
    if not vis.any():
        return None
    d2 = ((det.keypoints[vis, :2] - ann.keypoints[vis, :2]) ** 2).sum(axis=1)
    denom = 2.0 * ann.scale**2 * schema.k_array()[vis] ** 2
    return float(np.mean(np.exp(-d2 / denom)))


def greedy_match(dets, anns, oks_matrix, threshold, active):
    """Match detections (already sorted by descending score) to
    annotations at one threshold.

    ``active[j]`` is False for annotations to ignore (out of the area
    band).  Returns (matched annotation index or -1 per detection,
    ignored flag per detection).  A detection prefers the highest-OKS
    unmatched active annotation; failing that it may claim an ignored
    one, which removes it from precision-recall entirely.
    """
    taken = np.zeros(len(anns), dtype=bool)
    matches = np.full(len(dets), -1, dtype=int)
    ignored = np.zeros(len(dets), dtype=bool)
    for di in range(len(dets)):
        best, best_oks = -1, threshold
        best_ignored, best_ignored_oks = -1, threshold
        for aj in range(len(anns)):
            if taken[aj]:
                continue
            value = oks_matrix[di, aj]
            if active[aj]:
                if value >= best_oks:
                    best, best_oks = aj, value
            elif value >= best_ignored_oks:
                best_ignored, best_ignored_oks = aj, value
        if best >= 0:
            matches[di] = best
            taken[best] = True
        elif best_ignored >= 0:
            matches[di] = best_ignored
            taken[best_ignored] = True
            ignored[di] = True
    return matches, ignored


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_medium: float
    ap_large: float
    ar: float
    # per OKS threshold (area band "all"): interpolated precision curves
    precision_curves: dict = field(default_factory=dict)

    def as_rows(self):
        return [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_M", self.ap_medium),
            ("AP_L", self.ap_large),
            ("AR", self.ar),
        ]


def _sorted_dets_by_image(dets, max_dets):
    by_image = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)
    for image_id, group in by_image.items():
        order = np.argsort([-g.score for g in group], kind="mergesort")
        by_image[image_id] = [group[i] for i in order[:max_dets]]
    return by_image


def _band_ap_ar(dets_by_image, anns_by_image, schema, thresholds, area_range):
    """(mean AP, mean AR, precision curves) for one area band; AP/AR are
    None when the band holds no annotations."""
    lo, hi = area_range
    per_threshold_ap = []
    per_threshold_recall = []
    curves = {}

    # flatten detections once, globally sorted by score
    entries = []  # (score, image_id, det index within image)
    for image_id, dets in dets_by_image.items():
        for di, d in enumerate(dets):
            entries.append((d.score, image_id, di))
    order = np.argsort([-e[0] for e in entries], kind="mergesort")

    n_active = 0
    matrices = {}
    active_by_image = {}
    anns_valid = {}
    for image_id in set(dets_by_image) | set(anns_by_image):
        anns = [a for a in anns_by_image.get(image_id, []) if a.num_visible() > 0]
        anns_valid[image_id] = anns
        active = np.array([lo <= a.area <= hi for a in anns], dtype=bool)
        active_by_image[image_id] = active
        n_active += int(active.sum())
        dets = dets_by_image.get(image_id, [])
        matrix = np.zeros((len(dets), len(anns)))
        for di, d in enumerate(dets):
            for aj, a in enumerate(anns):
                matrix[di, aj] = oks(d, a, schema)
        matrices[image_id] = matrix

    if n_active == 0:
        return None, None, curves

    for t in thresholds:
        flags = {}  # (image_id, det index) -> "tp" | "fp" | "ignore"
        for image_id, dets in dets_by_image.items():
            anns = anns_valid[image_id]
            matches, ignored = greedy_match(
                dets, anns, matrices[image_id], t, active_by_image[image_id]
            )
            for di in range(len(dets)):
                if ignored[di]:
                    flags[(image_id, di)] = "ignore"
                elif matches[di] >= 0:
                    flags[(image_id, di)] = "tp"
                else:
                    flags[(image_id, di)] = "fp"
        tp, fp = 0, 0
        precisions, recalls = [], []
        for idx in order:
            _, image_id, di = entries[idx]
            kind = flags.get((image_id, di), "fp")
            if kind == "ignore":
                continue
            if kind == "tp":
                tp += 1
            else:
                fp += 1
            precisions.append(tp / (tp + fp))
            recalls.append(tp / n_active)
        if precisions:
            pr = np.asarray(precisions)
            rc = np.asarray(recalls)
            # monotone envelope from the right
            for i in range(len(pr) - 1, 0, -1):
                pr[i - 1] = max(pr[i - 1], pr[i])
            q = np.zeros(len(RECALL_THRESHOLDS))
            inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
            valid = inds < len(pr)
            q[valid] = pr[inds[valid]]
            per_threshold_ap.append(q.mean())
            per_threshold_recall.append(rc[-1])
            curves[round(float(t), 2)] = q
        else:
            per_threshold_ap.append(0.0)
            per_threshold_recall.append(0.0)
            curves[round(float(t), 2)] = np.zeros(len(RECALL_THRESHOLDS))
    return float(np.mean(per_threshold_ap)), float(np.mean(per_threshold_recall)), curves


def evaluate(
    dets,
    anns,
    schema: KeypointSchema,
    thresholds=OKS_THRESHOLDS,
    max_dets: int = 20,
) -> EvalResult:
    """Full protocol over all area bands.  Raises when there is no
    annotation with an annotated keypoint (undefined metrics)."""
    if not any(a.num_visible() > 0 for a in anns):
        raise DataError("evaluation undefined: no annotation has an annotated keypoint")
    for d in dets:
        if d.keypoints.shape[0] != schema.num_keypoints:
            raise SchemaError(
                f"detection for image {d.image_id} has {d.keypoints.shape[0]} keypoints, "
                f"schema {schema.name} expects {schema.num_keypoints}"
            )
    dets_by_image = _sorted_dets_by_image(dets, max_dets)
    anns_by_image = {}
    for a in anns:
        anns_by_image.setdefault(a.image_id, []).append(a)

    ap_all, ar_all, curves = _band_ap_ar(dets_by_image, anns_by_image, schema, thresholds, AREA_ALL)
    ap_m, _, _ = _band_ap_ar(dets_by_image, anns_by_image, schema, thresholds, AREA_MEDIUM)
    ap_l, _, _ = _band_ap_ar(dets_by_image, anns_by_image, schema, thresholds, AREA_LARGE)
    ap50, _, _ = _band_ap_ar(dets_by_image, anns_by_image, schema, (0.50,), AREA_ALL)
    ap75, _, _ = _band_ap_ar(dets_by_image, anns_by_image, schema, (0.75,), AREA_ALL)

    missing = -1.0  # band without annotations, mirrors the usual sentinel
    return EvalResult(
        ap=ap_all if ap_all is not None else missing,
        ap50=ap50 if ap50 is not None else missing,
        ap75=ap75 if ap75 is not None else missing,
        ap_medium=ap_m if ap_m is not None else missing,
        ap_large=ap_l if ap_l is not None else missing,
        ar=ar_all if ar_all is not None else missing,
        precision_curves=curves,
    )


def format_report(result: EvalResult) -> str:
    lines = ["metric\tvalue"]
    for name, value in result.as_rows():
        lines.append(f"{name}\t{value:.6f}")
    return "\n".join(lines) + "\n"
