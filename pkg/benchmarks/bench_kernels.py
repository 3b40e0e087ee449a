"""Time the compiled kernels against the numpy fallback on realistic sizes.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are checked for identical output before timing.
"""
import argparse
import timeit

import numpy as np

from msdet import _pykernels as py

try:
    from msdet import _ckernels as ck
except ImportError:  # extension not built
    ck = None


def _boxes(rng, n, extent=144.0):
    xy = rng.uniform(0, extent * 0.8, size=(n, 2))
    wh = rng.uniform(4, extent * 0.5, size=(n, 2))
    return np.hstack([xy, np.minimum(xy + wh, extent)])


def cases(rng):
    props = _boxes(rng, 400)
    gts = _boxes(rng, 3)
    order = np.lexsort((np.arange(400), -rng.uniform(size=400)))
    classes = rng.integers(1, 7, size=400)
    integral = np.cumsum(np.cumsum(rng.uniform(size=(145, 145, 8)), 0), 1)
    ib = np.floor(props).astype(np.int64)
    ib[:, 2:] = np.maximum(ib[:, 2:], ib[:, :2] + 1)
    n_img = 200
    det_img = np.repeat(np.arange(n_img), 10).astype(np.int64)
    det_boxes = _boxes(rng, det_img.size)
    gt_count = rng.integers(1, 4, size=n_img).astype(np.int64)
    gt_start = np.concatenate([[0], np.cumsum(gt_count)[:-1]]).astype(np.int64)
    gt_boxes = _boxes(rng, int(gt_count.sum()))
    return {
        "iou_matrix 400x3": ("iou_matrix", (props, gts)),
        "iou_matrix 400x400": ("iou_matrix", (props, props)),
        "nms_greedy 400": ("nms_greedy", (props, order, classes, 0.3)),
        "box_sums 400": ("box_sums", (integral, ib)),
        "match_detections 2000": ("match_detections", (det_img, det_boxes, gt_start, gt_count, gt_boxes, 0.5)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if ck is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for label, (name, a) in cases(rng).items():
        fp, fc = getattr(py, name), getattr(ck, name)
        if not np.array_equal(fp(*a), fc(*a)):
            raise SystemExit(f"{label}: backends disagree")
        number = 3
        tp = min(timeit.repeat(lambda: fp(*a), number=number, repeat=args.repeat)) / number
        tc = min(timeit.repeat(lambda: fc(*a), number=number, repeat=args.repeat)) / number
        print(f"{label:<24}{1e3 * tp:>12.3f}{1e3 * tc:>12.3f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
