"""Hot-kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``MSDET_PURE_PYTHON=1`` to force the fallback.
"""
import os

from msdet import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MSDET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from msdet import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

iou_matrix = _impl.iou_matrix
nms_greedy = _impl.nms_greedy
match_detections = _impl.match_detections
box_sums = _impl.box_sums

__all__ = ["BACKEND", "iou_matrix", "nms_greedy", "match_detections", "box_sums"]
