"""Independent reference implementations used as test oracles.

They share no code with the package: IoU by counting raster cells, AP by
literally scanning the ranked list in rational arithmetic.
"""
from fractions import Fraction

import numpy as np


def raster_iou_int(a, b):
    """Exact IoU of integer boxes by counting unit pixels."""
    W = int(max(a[2], b[2])) + 1
    H = int(max(a[3], b[3])) + 1
    ma = np.zeros((H, W), dtype=bool)
    mb = np.zeros((H, W), dtype=bool)
    ma[a[1]:a[3], a[0]:a[2]] = True
    mb[b[1]:b[3], b[0]:b[2]] = True
    inter = int(np.sum(ma & mb))
    union = int(np.sum(ma | mb))
    return Fraction(inter, union)


def raster_iou_float(a, b, step=1e-4, extent=20.0):
    """IoU of real boxes from point samples on a fine grid (separable per axis)."""
    xs = (np.arange(int(extent / step)) + 0.5) * step

    def cover(lo, hi):
        return (xs >= lo) & (xs < hi)

    def area(box):
        return cover(box[0], box[2]).sum() * cover(box[1], box[3]).sum()

    ix = (cover(a[0], a[2]) & cover(b[0], b[2])).sum()
    iy = (cover(a[1], a[3]) & cover(b[1], b[3])).sum()
    inter = float(ix) * float(iy)
    return inter / (float(area(a)) + float(area(b)) - inter)


def brute_ap(image_ids, scores, boxes, gts, variant, thresh=Fraction(1, 2)):
    """AP straight from the definitions, all in Fractions.

    Detections are ranked by score, ties by image id then input position.
    Each takes its highest-IoU ground truth (first on ties); it is a true
    positive if that IoU reaches ``thresh`` and the box is still free.
    """
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], image_ids[i], i))
    taken = set()
    tps = []
    for i in order:
        g = gts.get(image_ids[i], [])
        if not g:
            tps.append(0)
            continue
        ious = [raster_iou_int(boxes[i], gb) for gb in g]
        j = ious.index(max(ious))
        if ious[j] >= thresh and (image_ids[i], j) not in taken:
            taken.add((image_ids[i], j))
            tps.append(1)
        else:
            tps.append(0)
    num_gt = sum(len(v) for v in gts.values())
    prec, rec = [], []
    c = 0
    for k, t in enumerate(tps):
        c += t
        prec.append(Fraction(c, k + 1))
        rec.append(Fraction(c, num_gt))
    if variant == "eleven_point":
        total = Fraction(0)
        for t in range(11):
            cand = [p for p, r in zip(prec, rec) if r >= Fraction(t, 10)]
            total += max(cand) if cand else Fraction(0)
        return total / 11
    mrec = [Fraction(0)] + rec + [Fraction(1)]
    mpre = [Fraction(0)] + prec + [Fraction(0)]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return sum(((mrec[i + 1] - mrec[i]) * mpre[i + 1] for i in range(len(mrec) - 1) if mrec[i + 1] != mrec[i]),
               Fraction(0))
