"""Deterministic bottom-up proposal generator.

Stands in for selective search: flat-color segments and high-texture blobs
are found from pixels alone, adjacent segments are grouped, each candidate is
jittered, and a multi-scale grid fills the budget. Nothing here reads object
annotations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from msdet.synthdata.render import STREAM_JITTER, stream


@dataclass(frozen=True)
class ProposalConfig:
    min_count: int = 250
    max_count: int = 400
    min_segment_area: int = 12
    min_box_side: int = 4
    jitter_per_box: int = 6
    jitter_scale: float = 0.3
    jitter_shift: float = 0.2
    texture_window: int = 5
    texture_density: float = 0.5
    edge_threshold: float = 24.0
    grid_sizes: tuple = (16, 24, 36, 54, 80, 110)
    grid_aspects: tuple = (0.6, 1.0, 1.6)
    grid_stride: float = 0.5

    def __post_init__(self):
        if not 0 < self.min_count <= self.max_count:
            raise ValueError(f"need 0 < min_count <= max_count, got {self.min_count}, {self.max_count}")


def edge_mask(image, threshold):
    """Pixels whose forward-difference gradient magnitude exceeds ``threshold``."""
    g = image.astype(np.float64).mean(axis=2)
    gx = np.zeros_like(g)
    gy = np.zeros_like(g)
    gx[:, :-1] = g[:, 1:] - g[:, :-1]
    gy[:-1, :] = g[1:, :] - g[:-1, :]
    return np.sqrt(gx * gx + gy * gy) > threshold


def _component_boxes(mask, min_area):
    labels, n = ndimage.label(mask)
    if n == 0:
        return []
    out = []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or areas[idx] < min_area:
            continue
        out.append((sl[1].start, sl[0].start, sl[1].stop, sl[0].stop, int(areas[idx])))
    return out


def segment_boxes(image, cfg):
    """Boxes of flat-color segments (background excluded) and texture blobs."""
    H, W, _ = image.shape
    code = (image[..., 0].astype(np.int64) << 16) | (image[..., 1].astype(np.int64) << 8) | image[..., 2]
    segs = []
    for color in np.unique(code):
        for x1, y1, x2, y2, area in _component_boxes(code == color, cfg.min_segment_area):
            if area > 0.4 * H * W:
                continue
            segs.append((x1, y1, x2, y2))
    edges = edge_mask(image, cfg.edge_threshold)
    density = ndimage.uniform_filter(edges.astype(np.float64), size=cfg.texture_window, mode="constant")
    for x1, y1, x2, y2, _ in _component_boxes(density > cfg.texture_density, 9):
        segs.append((x1, y1, x2, y2))
    return segs


def _touch(a, b):
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def _union(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def grouped_boxes(segs):
    """Segments plus unions of adjacent pairs and connected triples."""
    n = len(segs)
    adj = [[j for j in range(n) if j != i and _touch(segs[i], segs[j])] for i in range(n)]
    out = list(segs)
    for i in range(n):
        for j in adj[i]:
            if j > i:
                out.append(_union(segs[i], segs[j]))
    for i in range(n):
        nb = adj[i]
        for a in range(len(nb)):
            for b in range(a + 1, len(nb)):
                out.append(_union(_union(segs[i], segs[nb[a]]), segs[nb[b]]))
    return out


def _clip(box, W, H):
    x1, y1, x2, y2 = box
    return (max(0, min(W, x1)), max(0, min(H, y1)), max(0, min(W, x2)), max(0, min(H, y2)))


def propose_regions(image, cfg=None, seed=0, key=()):
    """Proposal boxes ``[n, 4]`` (float64, integer-valued) for one image."""
    cfg = cfg or ProposalConfig()
    H, W, _ = image.shape
    rng = stream(seed, STREAM_JITTER, *key)
    base = grouped_boxes(segment_boxes(image, cfg))
    boxes = []
    for b in base:
        boxes.append(b)
        w, h = b[2] - b[0], b[3] - b[1]
        cx, cy = (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0
        draws = rng.uniform(-1.0, 1.0, size=(cfg.jitter_per_box, 4))
        for d in draws:
            nw = w * (1.0 + cfg.jitter_scale * d[0])
            nh = h * (1.0 + cfg.jitter_scale * d[1])
            ncx = cx + cfg.jitter_shift * w * d[2]
            ncy = cy + cfg.jitter_shift * h * d[3]
            boxes.append((int(round(ncx - nw / 2)), int(round(ncy - nh / 2)),
                          int(round(ncx + nw / 2)), int(round(ncy + nh / 2))))
    grid = []
    for size in cfg.grid_sizes:
        for aspect in cfg.grid_aspects:
            gw = max(cfg.min_box_side, int(round(size * np.sqrt(aspect))))
            gh = max(cfg.min_box_side, int(round(size / np.sqrt(aspect))))
            sx = max(2, int(round(gw * cfg.grid_stride)))
            sy = max(2, int(round(gh * cfg.grid_stride)))
            ox = int(rng.integers(0, sx))
            oy = int(rng.integers(0, sy))
            for y in range(oy - gh // 4, H - gh // 2, sy):
                for x in range(ox - gw // 4, W - gw // 2, sx):
                    grid.append((x, y, x + gw, y + gh))
    seen = set()
    primary = []
    for b in boxes:
        c = _clip(b, W, H)
        if c[2] - c[0] < cfg.min_box_side or c[3] - c[1] < cfg.min_box_side or c in seen:
            continue
        seen.add(c)
        primary.append(c)
    primary = primary[: cfg.max_count]
    extra = []
    for b in grid:
        c = _clip(b, W, H)
        if c[2] - c[0] < cfg.min_box_side or c[3] - c[1] < cfg.min_box_side or c in seen:
            continue
        seen.add(c)
        extra.append(c)
    room = cfg.max_count - len(primary)
    target = max(cfg.min_count - len(primary), min(room, len(extra), max(0, (cfg.min_count + cfg.max_count) // 2 - len(primary))))
    if target < len(extra):
        pick = np.sort(rng.choice(len(extra), size=max(0, target), replace=False))
        extra = [extra[i] for i in pick]
    out = np.array(primary + extra, dtype=np.float64).reshape(-1, 4)
    return out
