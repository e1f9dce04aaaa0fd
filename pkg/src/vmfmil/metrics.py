"""Box geometry and detection metrics: IoU, NMS, CorLoc, AP/mAP."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ValidationError

log = logging.getLogger(__name__)


@dataclass
class Detection:
    image_id: str
    class_id: str
    box: np.ndarray
    score: float

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "class": self.class_id,
            "box": [float(v) for v in self.box],
            "score": float(self.score),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(obj["image_id"], obj["class"], np.asarray(obj["box"]), float(obj["score"]))


def _check_box(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,) or box[0] >= box[2] or box[1] >= box[3]:
        raise ValidationError(f"degenerate box {box}")
    return box


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    a, b = _check_box(a), _check_box(b)
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, (len(a), len(b))."""
    a = np.asarray(boxes_a, dtype=np.float64)
    b = np.asarray(boxes_b, dtype=np.float64)
    ix = np.clip(
        np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0, None,
    )
    iy = np.clip(
        np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
        0, None,
    )
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; ties broken by lower index."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] != scores.shape[0]:
        raise ValidationError("boxes and scores must have equal length")
    # stable sort on -score keeps the lower index first among ties
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(int(idx))
        ious = iou_matrix(boxes[idx : idx + 1], boxes)[0]
        suppressed |= ious >= iou_thresh
        suppressed[idx] = True
    return kept


def corloc(
    top_boxes: dict[str, np.ndarray],
    gt_boxes: dict[str, list[np.ndarray]],
    iou_thresh: float = 0.5,
) -> float:
    """Percentage of images whose single top box hits any gt box at IoU >= t.

    Both mappings must cover exactly the images that contain the class; an
    image with an empty gt list is a protocol violation.
    """
    if not top_boxes:
        raise ProtocolError("corloc needs at least one image")
    hits = 0
    for image_id, box in top_boxes.items():
        gts = gt_boxes.get(image_id)
        if not gts:
            raise ProtocolError(f"image {image_id} has no ground truth for the class")
        if any(iou(box, g) >= iou_thresh for g in gts):
            hits += 1
    return 100.0 * hits / len(top_boxes)


def class_agnostic_corloc(
    top_boxes: dict[str, np.ndarray],
    gt_boxes: dict[str, list[np.ndarray]],
    iou_thresh: float = 0.5,
) -> float:
    """CorLoc with the class check relaxed: gt lists pool the episode target."""
    return corloc(top_boxes, gt_boxes, iou_thresh)


def binomial_ci95(rate: float, n: int) -> float:
    """Half-width of the normal-approximation 95% interval, in points of 100."""
    if n <= 0:
        return float("nan")
    p = rate / 100.0
    return 100.0 * 1.96 * math.sqrt(max(p * (1.0 - p), 0.0) / n)


def average_precision(
    detections: list[Detection],
    gt_boxes: dict[str, list[np.ndarray]],
    iou_thresh: float = 0.5,
    interpolation: str = "all",
) -> float | None:
    """AP for one class: greedy score-ordered matching, each gt used once.

    Returns None when the class has no gt instances (undefined AP).
    """
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        log.info("average_precision: class has no gt instances, AP undefined")
        return None
    dets = sorted(detections, key=lambda d: -d.score)
    matched: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gt_boxes.items()}
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for i, det in enumerate(dets):
        gts = gt_boxes.get(det.image_id, [])
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            v = iou(det.box, g)
            if v >= best_iou and not matched[det.image_id][j]:
                best, best_iou = j, v
        if best >= 0:
            matched[det.image_id][best] = True
            tp[i] = 1
        else:
            fp[i] = 1
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    if interpolation == "11pt":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            mask = recall >= t
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    if interpolation != "all":
        raise ValidationError(f"unknown AP interpolation {interpolation!r}")
    # All-point interpolation: running max of precision from the right.
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def mean_ap(per_class_ap: dict[str, float | None]) -> float:
    """Arithmetic mean over classes with defined AP."""
    defined = [v for v in per_class_ap.values() if v is not None]
    if not defined:
        raise ValidationError("no class has a defined AP")
    return float(np.mean(defined))
