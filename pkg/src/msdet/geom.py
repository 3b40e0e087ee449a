"""Boxes, IoU, region labeling and non-maximum suppression."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from msdet import kernels

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.1


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite: {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box needs x2 > x1 and y2 > y1: {vals}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    class_id: int
    image_id: int = 0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


class RegionLabel(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORED = "ignored"


def boxes_array(boxes):
    """Stack BBox objects (or pass through an array) into ``[n, 4]`` float64."""
    if isinstance(boxes, np.ndarray):
        return np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)


def iou(a, b):
    """Intersection over union of two boxes; 0 when they are disjoint."""
    return float(kernels.iou_matrix(boxes_array([a]), boxes_array([b]))[0, 0])


def iou_matrix(a, b):
    return kernels.iou_matrix(boxes_array(a), boxes_array(b))


def label_from_iou(max_iou):
    if max_iou >= POSITIVE_IOU:
        return RegionLabel.POSITIVE
    if max_iou >= NEGATIVE_IOU:
        return RegionLabel.NEGATIVE
    return RegionLabel.IGNORED


def label_region(r, gts):
    if len(gts) == 0:
        return RegionLabel.IGNORED
    return label_from_iou(float(iou_matrix([r], gts).max()))


def label_regions(boxes, gts):
    """Vectorized labeling: returns (labels int8 [n], max_iou [n], argmax_gt [n]).

    Labels are 1 positive, 0 negative, -1 ignored.
    """
    boxes = boxes_array(boxes)
    gts = boxes_array(gts)
    n = boxes.shape[0]
    if gts.shape[0] == 0:
        return np.full(n, -1, dtype=np.int8), np.zeros(n), np.full(n, -1, dtype=np.int64)
    ov = kernels.iou_matrix(boxes, gts)
    best = ov.argmax(axis=1)
    max_iou = ov[np.arange(n), best]
    labels = np.full(n, -1, dtype=np.int8)
    labels[max_iou >= NEGATIVE_IOU] = 0
    labels[max_iou >= POSITIVE_IOU] = 1
    return labels, max_iou, best


def score_order(scores):
    """Indices sorted by score descending, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def nms_arrays(boxes, scores, classes, iou_threshold):
    """Per-class greedy NMS on arrays; returns kept indices in (score desc, index) order."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = score_order(scores)
    return kernels.nms_greedy(boxes_array(boxes), order, np.asarray(classes, dtype=np.int64), iou_threshold)


def nms(dets, iou_threshold):
    if not dets:
        if not 0.0 < iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
        return []
    keep = nms_arrays(
        [d.box for d in dets],
        [d.score for d in dets],
        [d.class_id for d in dets],
        iou_threshold,
    )
    return [dets[i] for i in keep]


# ---------------------------------------------------------------- record I/O


def format_detection(image_id, class_id, score, box):
    x1, y1, x2, y2 = box
    return f"{int(image_id)},{int(class_id)},{score:.9g},{x1:.9g},{y1:.9g},{x2:.9g},{y2:.9g}"


def write_detections(path, dets):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dets:
            fh.write(format_detection(d.image_id, d.class_id, d.score, (d.box.x1, d.box.y1, d.box.x2, d.box.y2)))
            fh.write("\n")


def read_detections(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            img, cls = int(parts[0]), int(parts[1])
            vals = [float(p) for p in parts[2:]]
            out.append(Detection(BBox(*vals[1:]), vals[0], cls, img))
    return out
