# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``.

Arithmetic is written in the same order as the numpy reference so results are
bit-identical; do not build with -ffast-math.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _dmax(double a, double b) nogil:
    return a if a > b else b


cdef inline double _dmin(double a, double b) nogil:
    return a if a < b else b


cdef inline double _iou(const double[:, ::1] a, Py_ssize_t i,
                        const double[:, ::1] b, Py_ssize_t j,
                        double area_a, double area_b) nogil:
    cdef double iw = _dmin(a[i, 2], b[j, 2]) - _dmax(a[i, 0], b[j, 0])
    cdef double ih = _dmin(a[i, 3], b[j, 3]) - _dmax(a[i, 1], b[j, 1])
    iw = _dmax(iw, 0.0)
    ih = _dmax(ih, 0.0)
    cdef double inter = iw * ih
    cdef double union = area_a + area_b - inter
    if union > 0:
        return inter / union
    return 0.0


def iou_matrix(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[::1] area_b = np.empty(m, dtype=np.float64)
    cdef double area_a
    with nogil:
        for j in range(m):
            area_b[j] = (bv[j, 2] - bv[j, 0]) * (bv[j, 3] - bv[j, 1])
        for i in range(n):
            area_a = (av[i, 2] - av[i, 0]) * (av[i, 3] - av[i, 1])
            for j in range(m):
                ov[i, j] = _iou(av, i, bv, j, area_a, area_b[j])
    return out


def nms_greedy(boxes, order, classes, double threshold):
    cdef const double[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef const cnp.int64_t[::1] ordv = np.ascontiguousarray(order, dtype=np.int64)
    cdef const cnp.int64_t[::1] clsv = np.ascontiguousarray(classes, dtype=np.int64)
    cdef Py_ssize_t n = ordv.shape[0], i, j, oi, oj, nkeep = 0
    cdef cnp.uint8_t[::1] suppressed = np.zeros(n, dtype=np.uint8)
    keep = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] keepv = keep
    cdef double[::1] areas = np.empty(n, dtype=np.float64)
    with nogil:
        for i in range(n):
            oi = ordv[i]
            areas[i] = (bv[oi, 2] - bv[oi, 0]) * (bv[oi, 3] - bv[oi, 1])
        for i in range(n):
            if suppressed[i]:
                continue
            oi = ordv[i]
            keepv[nkeep] = oi
            nkeep += 1
            for j in range(i + 1, n):
                if suppressed[j]:
                    continue
                oj = ordv[j]
                if clsv[oj] != clsv[oi]:
                    continue
                if _iou(bv, oi, bv, oj, areas[i], areas[j]) > threshold:
                    suppressed[j] = 1
    return keep[:nkeep].copy()


def match_detections(det_image, det_boxes, gt_start, gt_count, gt_boxes, double threshold):
    cdef const cnp.int64_t[::1] img = np.ascontiguousarray(det_image, dtype=np.int64)
    cdef const double[:, ::1] dv = np.ascontiguousarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    cdef const cnp.int64_t[::1] gs = np.ascontiguousarray(gt_start, dtype=np.int64)
    cdef const cnp.int64_t[::1] gc = np.ascontiguousarray(gt_count, dtype=np.int64)
    cdef const double[:, ::1] gv = np.ascontiguousarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = dv.shape[0], i, k, s, c, best
    cdef double ov, bestov, area_d
    taken_arr = np.zeros(gv.shape[0], dtype=np.uint8)
    cdef cnp.uint8_t[::1] taken = taken_arr
    tp = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] tpv = tp
    with nogil:
        for i in range(n):
            s = gs[img[i]]
            c = gc[img[i]]
            if c == 0:
                continue
            area_d = (dv[i, 2] - dv[i, 0]) * (dv[i, 3] - dv[i, 1])
            best = 0
            bestov = -1.0
            for k in range(c):
                ov = _iou(dv, i, gv, s + k, area_d,
                          (gv[s + k, 2] - gv[s + k, 0]) * (gv[s + k, 3] - gv[s + k, 1]))
                if ov > bestov:
                    bestov = ov
                    best = k
            if bestov >= threshold and not taken[s + best]:
                taken[s + best] = 1
                tpv[i] = 1
    return tp


def box_sums(integral, boxes):
    cdef const double[:, :, ::1] iv = np.ascontiguousarray(integral, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.int64).reshape(-1, 4)
    cdef Py_ssize_t n = bv.shape[0], nc = iv.shape[2], i, c, x1, y1, x2, y2
    out = np.empty((n, nc), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            x1 = bv[i, 0]
            y1 = bv[i, 1]
            x2 = bv[i, 2]
            y2 = bv[i, 3]
            for c in range(nc):
                ov[i, c] = ((iv[y2, x2, c] - iv[y1, x2, c]) - iv[y2, x1, c]) + iv[y1, x1, c]
    return out
