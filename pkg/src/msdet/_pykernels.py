"""Pure-Python/numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them operation
for operation so both backends return bit-identical results.
"""
import numpy as np


def iou_matrix(a, b):
    """Pairwise IoU between ``a[n, 4]`` and ``b[m, 4]`` (x1, y1, x2, y2)."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    iw = np.maximum(iw, 0.0)
    ih = np.maximum(ih, 0.0)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_greedy(boxes, order, classes, threshold):
    """Greedy NMS visiting ``order``; returns kept indices in visiting order.

    A later box is suppressed when it shares a class with a kept box and their
    IoU is strictly greater than ``threshold``.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.asarray(order, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    n = order.shape[0]
    suppressed = np.zeros(n, dtype=bool)
    ob = boxes[order]
    oc = classes[order]
    areas = (ob[:, 2] - ob[:, 0]) * (ob[:, 3] - ob[:, 1])
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(int(order[i]))
        rest = np.arange(i + 1, n)
        rest = rest[(~suppressed[rest]) & (oc[rest] == oc[i])]
        if rest.size == 0:
            continue
        iw = np.maximum(np.minimum(ob[i, 2], ob[rest, 2]) - np.maximum(ob[i, 0], ob[rest, 0]), 0.0)
        ih = np.maximum(np.minimum(ob[i, 3], ob[rest, 3]) - np.maximum(ob[i, 1], ob[rest, 1]), 0.0)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        suppressed[rest[ov > threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def match_detections(det_image, det_boxes, gt_start, gt_count, gt_boxes, threshold):
    """VOC-style greedy matching of score-sorted detections to ground truth.

    ``det_image[i]`` indexes an image whose ground truth occupies rows
    ``gt_start[img] : gt_start[img] + gt_count[img]`` of ``gt_boxes``. Each
    detection takes the highest-IoU ground truth of its image (first on ties);
    it is a true positive when that IoU >= ``threshold`` and the ground truth
    is still unmatched. Returns a 0/1 array of true positives.
    """
    det_boxes = np.ascontiguousarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.ascontiguousarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    taken = np.zeros(gt_boxes.shape[0], dtype=bool)
    tp = np.zeros(det_boxes.shape[0], dtype=np.int64)
    for i in range(det_boxes.shape[0]):
        img = det_image[i]
        s = gt_start[img]
        c = gt_count[img]
        if c == 0:
            continue
        ov = iou_matrix(det_boxes[i:i + 1], gt_boxes[s:s + c])[0]
        j = int(np.argmax(ov))
        if ov[j] >= threshold and not taken[s + j]:
            taken[s + j] = True
            tp[i] = 1
    return tp


def box_sums(integral, boxes):
    """Box sums over a summed-area table ``integral[H+1, W+1, C]``.

    ``boxes`` are integer pixel rectangles ``[n, 4]`` with exclusive upper
    bounds. Returns ``[n, C]``.
    """
    integral = np.ascontiguousarray(integral, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return ((integral[y2, x2] - integral[y1, x2]) - integral[y2, x1]) + integral[y1, x1]
