"""Hand-crafted region descriptors computed from summed-area tables."""
from __future__ import annotations

import numpy as np

from msdet import kernels
from msdet.synthdata.proposals import edge_mask

HIST_BINS = 8
GEOMETRY = ("center_x", "center_y", "width_frac", "height_frac", "log_aspect", "area_frac")
FEATURE_NAMES = (
    GEOMETRY
    + tuple(f"mean_{c}" for c in "rgb")
    + tuple(f"std_{c}" for c in "rgb")
    + tuple(f"hist_{c}{i}" for c in "rgb" for i in range(HIST_BINS))
    + ("edge_density", "border_contrast")
)
NUM_FEATURES = len(FEATURE_NAMES)
CENTER_X = FEATURE_NAMES.index("center_x")
BLOCKS = {
    "geometry": slice(0, 6),
    "color_moments": slice(6, 12),
    "histogram": slice(12, 12 + 3 * HIST_BINS),
    "edges": slice(12 + 3 * HIST_BINS, 13 + 3 * HIST_BINS),
    "contrast": slice(13 + 3 * HIST_BINS, 14 + 3 * HIST_BINS),
}


def integral_image(image, edge_threshold):
    """Summed-area table over [r, g, b, r^2, g^2, b^2, 24 histogram planes, edges]."""
    H, W, _ = image.shape
    px = image.astype(np.float64) / 255.0
    planes = [px, px * px]
    bins = (image.astype(np.int64) * HIST_BINS) // 256
    onehot = np.zeros((H, W, 3 * HIST_BINS))
    for c in range(3):
        onehot[np.arange(H)[:, None], np.arange(W)[None, :], c * HIST_BINS + bins[..., c]] = 1.0
    planes.append(onehot)
    planes.append(edge_mask(image, edge_threshold)[..., None].astype(np.float64))
    stack = np.concatenate(planes, axis=2)
    out = np.zeros((H + 1, W + 1, stack.shape[2]))
    out[1:, 1:] = stack.cumsum(axis=0).cumsum(axis=1)
    return out


def pixel_boxes(boxes, W, H):
    """Integer pixel rectangles covered by float boxes (at least one pixel)."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1 = np.clip(np.floor(b[:, 0]), 0, W - 1).astype(np.int64)
    y1 = np.clip(np.floor(b[:, 1]), 0, H - 1).astype(np.int64)
    x2 = np.clip(np.ceil(b[:, 2]), 0, W).astype(np.int64)
    y2 = np.clip(np.ceil(b[:, 3]), 0, H).astype(np.int64)
    x2 = np.maximum(x2, x1 + 1)
    y2 = np.maximum(y2, y1 + 1)
    return np.stack([x1, y1, x2, y2], axis=1)


def extract_features(image, boxes, edge_threshold=24.0, ring_frac=0.25):
    """Raw (unstandardized) descriptors ``[n, NUM_FEATURES]`` for ``boxes``."""
    image = np.asarray(image)
    H, W, _ = image.shape
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if b.shape[0] == 0:
        return np.zeros((0, NUM_FEATURES))
    bw = b[:, 2] - b[:, 0]
    bh = b[:, 3] - b[:, 1]
    if np.any(bw * bh < 1.0):
        bad = int(np.argmax(bw * bh < 1.0))
        raise ValueError(f"degenerate box (area < 1 px^2) at index {bad}: {b[bad].tolist()}")
    integral = integral_image(image, edge_threshold)
    pb = pixel_boxes(b, W, H)
    area = ((pb[:, 2] - pb[:, 0]) * (pb[:, 3] - pb[:, 1])).astype(np.float64)
    sums = kernels.box_sums(integral, pb)
    mean = sums[:, 0:3] / area[:, None]
    var = np.maximum(sums[:, 3:6] / area[:, None] - mean * mean, 0.0)
    hist = sums[:, 6:6 + 3 * HIST_BINS] / area[:, None]
    edges = sums[:, 6 + 3 * HIST_BINS] / area

    ring = np.maximum(1, np.round(ring_frac * np.minimum(pb[:, 2] - pb[:, 0], pb[:, 3] - pb[:, 1]))).astype(np.int64)
    outer = np.stack([
        np.maximum(pb[:, 0] - ring, 0),
        np.maximum(pb[:, 1] - ring, 0),
        np.minimum(pb[:, 2] + ring, W),
        np.minimum(pb[:, 3] + ring, H),
    ], axis=1)
    outer_area = ((outer[:, 2] - outer[:, 0]) * (outer[:, 3] - outer[:, 1])).astype(np.float64)
    outer_sums = kernels.box_sums(integral[:, :, 0:3].copy(), outer)
    ring_area = outer_area - area
    has_ring = ring_area > 0
    ring_mean = np.where(has_ring[:, None], (outer_sums - sums[:, 0:3]) / np.where(has_ring, ring_area, 1.0)[:, None], mean)
    contrast = np.abs(mean - ring_mean).mean(axis=1)

    geometry = np.stack([
        (b[:, 0] + b[:, 2]) / (2.0 * W),
        (b[:, 1] + b[:, 3]) / (2.0 * H),
        bw / W,
        bh / H,
        np.log(bw / bh),
        (bw * bh) / (W * H),
    ], axis=1)
    return np.concatenate([geometry, mean, np.sqrt(var), hist, edges[:, None], contrast[:, None]], axis=1)


def flip_geometry(raw):
    """Horizontal mirror of raw descriptors: only the center x coordinate changes."""
    out = np.array(raw, dtype=np.float64, copy=True)
    out[..., CENTER_X] = 1.0 - out[..., CENTER_X]
    return out


class Standardizer:
    """Per-feature z-scoring with statistics taken from one split."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, raw, min_std=1e-6):
        raw = np.asarray(raw, dtype=np.float64)
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        std = np.where(std < min_std, 1.0, std)
        return cls(mean, std)

    def transform(self, raw):
        return (np.asarray(raw, dtype=np.float64) - self.mean) / self.std

    def flip(self, z):
        """Mirror standardized descriptors without going back to raw space."""
        out = np.array(z, dtype=np.float64, copy=True)
        m, s = self.mean[CENTER_X], self.std[CENTER_X]
        out[..., CENTER_X] = ((1.0 - (out[..., CENTER_X] * s + m)) - m) / s
        return out

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])
