"""Detection metrics: PASCAL-style AP/mAP, CorLoc, proposal recall curves and
the object-part distribution of selected regions.

AP values are accumulated in exact rational arithmetic and rounded once, so
they do not depend on summation order.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from msdet import kernels
from msdet.geom import boxes_array

VARIANTS = ("eleven_point", "all_point")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float
    variant: str
    num_gt: int


def _check_thresh(iou_thresh):
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")


def detection_order(image_ids, scores):
    """Score descending, ties by image id, then input order."""
    image_ids = np.asarray(image_ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), image_ids, -scores))


def match(image_ids, scores, boxes, gts, iou_thresh=0.5):
    """True-positive flags of one class's detections in :func:`detection_order`.

    ``gts`` maps image id to a ``[g, 4]`` box array. Returns ``(order, tp)``.
    """
    _check_thresh(iou_thresh)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    boxes = boxes_array(boxes)
    order = detection_order(image_ids, scores)
    keys = sorted(gts)
    slot = {k: j for j, k in enumerate(keys)}
    counts = np.array([boxes_array(gts[k]).shape[0] for k in keys] + [0], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    gt_flat = np.concatenate([boxes_array(gts[k]) for k in keys] + [np.zeros((0, 4))])
    empty = len(keys)  # images without ground truth point at a zero-count slot
    det_slot = np.array([slot.get(int(i), empty) for i in image_ids[order]], dtype=np.int64)
    tp = kernels.match_detections(det_slot, boxes[order], starts, counts, gt_flat, float(iou_thresh))
    return order, np.asarray(tp, dtype=np.int64)


def ap_from_tp(tp, num_gt, variant="eleven_point"):
    """AP of a ranked list of 0/1 true-positive flags against ``num_gt`` objects."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    tp = np.asarray(tp, dtype=np.int64)
    n = tp.size
    if num_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    ctp = np.cumsum(tp)
    ranks = np.arange(1, n + 1)
    recall = ctp / num_gt
    precision = ctp / ranks if n else np.zeros(0)
    if n == 0:
        return PRCurve(recall, precision, 0.0, variant, num_gt)
    # suffix maxima of precision; the argmax index lets us recover the exact rational
    rev = precision[::-1]
    run_idx = np.zeros(n, dtype=np.int64)
    best = 0
    for j in range(n):
        if j == 0 or rev[j] > rev[best]:
            best = j
        run_idx[j] = best
    suffix_arg = (n - 1 - run_idx)[::-1]

    def exact_prec(i):
        return Fraction(int(ctp[i]), int(i + 1))

    if variant == "eleven_point":
        total = Fraction(0)
        for k in range(11):
            # first rank whose recall reaches k/10, compared in integers
            hit = np.nonzero(10 * ctp >= k * num_gt)[0]
            if hit.size:
                total += exact_prec(int(suffix_arg[hit[0]]))
        ap = total / 11
    else:
        total = Fraction(0)
        prev = 0
        for i in np.nonzero(tp)[0]:
            total += Fraction(int(ctp[i]) - prev, num_gt) * exact_prec(int(suffix_arg[i]))
            prev = int(ctp[i])
        ap = total
    return PRCurve(recall, precision, float(ap), variant, num_gt)


def average_precision(image_ids, scores, boxes, gts, iou_thresh=0.5, variant="eleven_point"):
    """AP of one class. ``gts`` maps image id to that class's ground-truth boxes."""
    _, tp = match(image_ids, scores, boxes, gts, iou_thresh)
    num_gt = sum(boxes_array(b).shape[0] for b in gts.values())
    return ap_from_tp(tp, num_gt, variant)


def mean_ap(per_class):
    """Mean over evaluated classes; ``None`` entries (no ground truth) are excluded."""
    vals = [v for v in per_class if v is not None]
    if not vals:
        raise ValueError("mean_ap needs at least one evaluated class")
    return float(math.fsum(vals) / len(vals))


def corloc(top_boxes, gts, iou_thresh=0.5):
    """CorLoc over ``(image, class)`` cases.

    ``gts`` maps ``(image, class)`` to that class's boxes in the image and
    defines the cases; ``top_boxes`` maps the same keys to the single most
    confident box (a missing key counts as a miss). Returns
    ``(overall, {class: corloc})``.
    """
    hits = {}
    for key in sorted(gts):
        g = boxes_array(gts[key])
        box = top_boxes.get(key)
        ok = False
        if box is not None and g.shape[0]:
            ok = bool(kernels.iou_matrix(boxes_array(box), g).max() >= iou_thresh)
        hits.setdefault(key[1], []).append(ok)
    per_class = {c: float(np.mean(v)) for c, v in sorted(hits.items())}
    allv = [x for v in hits.values() for x in v]
    return (float(np.mean(allv)) if allv else 0.0), per_class


def _count_for(p, n):
    return int(math.floor(p * n / 100.0 + 1e-9))


def recall_curve(ranked, gts, iou_thresh=0.7, percentages=(1, 2, 5, 10, 15, 20, 30, 50, 75, 100)):
    """Proposal recall when keeping the top ``p%`` of each image's ranked regions.

    ``ranked`` is a list of score-ordered ``[n, 4]`` arrays, ``gts`` a list of
    ground-truth arrays aligned with it. Returns ``(percentages, recalls)``.
    """
    pct = np.asarray(percentages, dtype=np.float64)
    if np.any((pct <= 0) | (pct > 100)):
        raise ValueError("percentages must lie in (0, 100]")
    total = sum(boxes_array(g).shape[0] for g in gts)
    out = np.zeros(pct.size)
    if total == 0:
        return pct, out
    ious = [kernels.iou_matrix(boxes_array(r), boxes_array(g)) for r, g in zip(ranked, gts)]
    for j, p in enumerate(pct):
        found = 0
        for ov in ious:
            k = _count_for(p, ov.shape[0])
            if k and ov.shape[1]:
                found += int(np.count_nonzero(ov[:k].max(axis=0) >= iou_thresh))
        out[j] = found / total
    return pct, out


def part_fraction(selected, gt):
    """Fraction of selected boxes whose max IoU with ground truth lies in (0, 0.5)."""
    selected = boxes_array(selected)
    if selected.shape[0] == 0:
        return None
    gt = boxes_array(gt)
    if gt.shape[0] == 0:
        return 0.0
    mx = kernels.iou_matrix(selected, gt).max(axis=1)
    return float(np.count_nonzero((mx > 0.0) & (mx < 0.5)) / selected.shape[0])


def part_distribution(selected, gts, bins=10):
    """Histogram over images of the part fraction of their selected regions.

    Returns ``(edges [bins + 1], masses [bins])``; masses sum to 1 when any
    image has selected regions. A fraction of exactly 1 falls in the last bin.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    fr = [part_fraction(s, g) for s, g in zip(selected, gts)]
    fr = np.array([f for f in fr if f is not None])
    edges = np.linspace(0.0, 1.0, bins + 1)
    masses = np.zeros(bins)
    if fr.size:
        idx = np.minimum((fr * bins).astype(np.int64), bins - 1)
        np.add.at(masses, idx, 1.0)
        masses /= fr.size
    return edges, masses


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    classes: list
    ap_11pt: dict
    ap_all: dict
    corloc: dict
    mean_ap_11pt: float
    mean_ap_all: float
    corloc_overall: float
    seed: int = 0
    config: dict = field(default_factory=dict)
    name: str = ""

    def to_dict(self):
        return {
            "name": self.name,
            "seed": self.seed,
            "classes": list(self.classes),
            "ap_11pt": self.ap_11pt,
            "ap_all": self.ap_all,
            "corloc": self.corloc,
            "mean_ap_11pt": self.mean_ap_11pt,
            "mean_ap_all": self.mean_ap_all,
            "corloc_overall": self.corloc_overall,
            "config": self.config,
        }

    def table_csv(self):
        buf = io.StringIO()
        buf.write("class,AP_11pt,AP_all,CorLoc\n")
        for c in self.classes:
            buf.write(f"{c},{pct(self.ap_11pt.get(c))},{pct(self.ap_all.get(c))},{pct(self.corloc.get(c))}\n")
        buf.write(f"mean,{pct(self.mean_ap_11pt)},{pct(self.mean_ap_all)},{pct(self.corloc_overall)}\n")
        return buf.getvalue()

    def to_text(self):
        import json

        lines = [f"run: {self.name}", f"seed: {self.seed}",
                 f"mAP (11-point): {pct(self.mean_ap_11pt)}%",
                 f"mAP (all-point): {pct(self.mean_ap_all)}%",
                 f"CorLoc: {pct(self.corloc_overall)}%", "", self.table_csv().rstrip("\n"), "",
                 "config:", json.dumps(self.config, sort_keys=True, indent=2)]
        return "\n".join(lines) + "\n"


def pct(v):
    """Fraction as a percentage with two decimals; blank for missing values."""
    return "" if v is None else f"{100.0 * v:.2f}"


def evaluate_detections(det, gts_by_image, num_classes, iou_thresh=0.5):
    """Per-class AP for a detection table.

    ``det`` has ``image``, ``class_id`` (1..K), ``score`` and ``box`` arrays;
    ``gts_by_image`` maps image to ``(boxes, class_ids)``. Classes without any
    ground truth get ``None``. Returns ``(ap_11pt list, ap_all list)``.
    """
    ap11, apall = [], []
    for c in range(1, num_classes + 1):
        gts = {}
        for img, (b, cls) in gts_by_image.items():
            b = boxes_array(b)
            sel = np.asarray(cls, dtype=np.int64) == c
            if np.any(sel):
                gts[img] = b[sel]
        if not gts:
            ap11.append(None)
            apall.append(None)
            continue
        m = det["class_id"] == c
        _, tp = match(det["image"][m], det["score"][m], det["box"][m], gts, iou_thresh)
        n = sum(v.shape[0] for v in gts.values())
        ap11.append(ap_from_tp(tp, n, "eleven_point").ap)
        apall.append(ap_from_tp(tp, n, "all_point").ap)
    return ap11, apall
