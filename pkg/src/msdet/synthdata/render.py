"""Category catalog and scene rendering.

Every object is drawn with a category-specific fill, a textured signature part
inside it and a signature context stripe directly underneath. Strong and weak
categories use swapped warm/cool palettes so the two domains differ in color
statistics while sharing the same geometry.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from msdet.geom import BBox

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ellipse")
SPLITS = ("strong", "weak", "test")

# RNG stream ids; each purpose draws from its own seeded stream.
STREAM_LAYOUT = 1
STREAM_JITTER = 2
STREAM_CATALOG = 3


def stream(seed, purpose, *key):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(purpose), *map(int, key)]))


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str
    fill: tuple
    part_colors: tuple  # two colors of the checker texture
    context: tuple

    def to_dict(self):
        return {
            "name": self.name,
            "shape": self.shape,
            "fill": list(self.fill),
            "part_colors": [list(c) for c in self.part_colors],
            "context": list(self.context),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            shape=d["shape"],
            fill=tuple(int(v) for v in d["fill"]),
            part_colors=tuple(tuple(int(v) for v in c) for c in d["part_colors"]),
            context=tuple(int(v) for v in d["context"]),
        )


def _warm(level):
    return (235, level, 35)


def _cool(level):
    return (35, level, 235)


def _part(level):
    return (215, level, 215), (70, level // 3, 70)


def default_categories(n_strong=6, n_weak=6, shared_fills=True):
    """Deterministic catalog with disjoint strong and weak name sets.

    Strong fills are warm and weak fills cool. Textured parts come from one
    magenta family shared by both domains, so a part looks alike in either.
    With ``shared_fills`` two categories of a side share each fill, so only
    part and context identify a weak category.
    """
    part_levels = [20, 60, 100, 140, 180, 220, 40, 80, 120, 160, 200, 240]
    levels = [40, 110, 180, 250, 75, 145, 215]
    ctx_levels = [(60, 200, 60), (200, 200, 200), (20, 20, 20), (120, 60, 160), (160, 110, 60), (60, 160, 160),
                  (200, 150, 200), (100, 100, 20)]
    strong, weak = [], []
    for i in range(n_strong):
        fill_level = levels[(i // 2 if shared_fills else i) % len(levels)]
        strong.append(CategorySpec(
            name=f"strong_{SHAPES[i % len(SHAPES)]}_{i}",
            shape=SHAPES[i % len(SHAPES)],
            fill=_warm(fill_level),
            part_colors=_part(part_levels[i % len(part_levels)]),
            context=ctx_levels[i % len(ctx_levels)],
        ))
    for i in range(n_weak):
        fill_level = levels[(i // 2 if shared_fills else i) % len(levels)]
        weak.append(CategorySpec(
            name=f"weak_{SHAPES[i % len(SHAPES)]}_{i}",
            shape=SHAPES[i % len(SHAPES)],
            fill=_cool(fill_level),
            part_colors=_part(part_levels[(n_strong + i) % len(part_levels)]),
            context=ctx_levels[(i + 1) % len(ctx_levels)],
        ))
    return strong, weak


@dataclass
class SceneObject:
    box: BBox
    category: str
    part_box: BBox
    context_box: BBox


@dataclass
class Scene:
    image: np.ndarray
    split: str
    objects: list = field(default_factory=list)
    clutter: list = field(default_factory=list)

    @property
    def labels(self):
        return tuple(sorted({o.category for o in self.objects}))


def shape_mask(shape, h, w):
    """Boolean mask of ``shape`` inscribed in an ``h x w`` box."""
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w - 0.5
    v = (yy + 0.5) / h - 0.5
    if shape == "circle":
        m = u * u + v * v <= 0.25
    elif shape == "square":
        m = np.ones((h, w), dtype=bool)
    elif shape == "triangle":
        m = np.abs(u) <= (v + 0.5) * 0.5
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 0.5
    elif shape == "cross":
        m = (np.abs(u) <= 0.2) | (np.abs(v) <= 0.2)
    elif shape == "ellipse":
        m = (u / 0.5) ** 2 + (v / 0.36) ** 2 <= 1.0
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _tight(mask, x0, y0):
    ys, xs = np.nonzero(mask)
    return BBox(float(x0 + xs.min()), float(y0 + ys.min()), float(x0 + xs.max() + 1), float(y0 + ys.max() + 1))


def _overlaps(a, b, margin):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def render_scene(rng, split, cats, canvas, cfg, clutter_palette):
    """Render one scene; ``cats`` are the categories allowed for its objects."""
    H = W = canvas
    bg = np.array(
        [int(rng.integers(70, 131))] * 3, dtype=np.int64) + rng.integers(-8, 9, size=3)
    # strong scenes lean warm, the others cool
    tint = cfg.domain_tint if split == "strong" else -cfg.domain_tint
    bg[0] += tint
    bg[2] -= tint
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = np.clip(bg, 0, 255).astype(np.uint8)
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    placed = []  # extents (x1, y1, x2, y2) including context stripe
    objects = []
    for _ in range(n_obj):
        spec = cats[int(rng.integers(len(cats)))]
        for _attempt in range(500):
            size = int(rng.integers(cfg.object_size_min, cfg.object_size_max + 1))
            aspect = float(rng.uniform(0.8, 1.25))
            w = max(8, int(round(size * np.sqrt(aspect))))
            h = max(8, int(round(size / np.sqrt(aspect))))
            cw = int(round(w * cfg.context_width))
            ch = int(round(h * cfg.context_height))
            ext_w = max(w, cw)
            ext_h = h + ch
            if ext_w + 2 > W or ext_h + 2 > H:
                continue
            ex1 = int(rng.integers(1, W - ext_w))
            ey1 = int(rng.integers(1, H - ext_h))
            ext = (ex1, ey1, ex1 + ext_w, ey1 + ext_h)
            if any(_overlaps(ext, p, 3) for p in placed):
                continue
            break
        else:
            raise ValueError(
                f"canvas {canvas}x{canvas} too small for {n_obj} objects of size up to {cfg.object_size_max}"
            )
        placed.append(ext)
        ox = ex1 + (ext_w - w) // 2
        oy = ey1
        cx1 = ex1 + (ext_w - cw) // 2
        cy1 = oy + h - max(1, h // 10)
        img[cy1:cy1 + ch, cx1:cx1 + cw] = spec.context
        mask = shape_mask(spec.shape, h, w)
        region = img[oy:oy + h, ox:ox + w]
        region[mask] = spec.fill
        ps = max(4, int(round(min(w, h) * cfg.part_size)))
        # part centered on the mask centroid, shrunk until it fits inside the shape
        ys, xs = np.nonzero(mask)
        pcy = int(round(ys.mean())) + int(rng.integers(-1, 2))
        pcx = int(round(xs.mean())) + int(rng.integers(-1, 2))
        while ps > 3:
            py1, px1 = pcy - ps // 2, pcx - ps // 2
            if py1 >= 0 and px1 >= 0 and py1 + ps <= h and px1 + ps <= w and mask[py1:py1 + ps, px1:px1 + ps].all():
                break
            ps -= 1
        yy, xx = np.mgrid[0:ps, 0:ps]
        checker = ((yy // 2 + xx // 2) % 2).astype(bool)
        patch = region[py1:py1 + ps, px1:px1 + ps]
        patch[checker] = spec.part_colors[0]
        patch[~checker] = spec.part_colors[1]
        box = _tight(mask, ox, oy)
        objects.append(SceneObject(
            box=box,
            category=spec.name,
            part_box=BBox(float(ox + px1), float(oy + py1), float(ox + px1 + ps), float(oy + py1 + ps)),
            context_box=BBox(min(box.x1, float(cx1)), box.y1, max(box.x2, float(cx1 + cw)), float(cy1 + ch)),
        ))
    clutter = []
    n_clutter = int(rng.integers(cfg.clutter_min, cfg.clutter_max + 1))
    for _ in range(n_clutter):
        for _attempt in range(50):
            s = int(rng.integers(cfg.clutter_size_min, cfg.clutter_size_max + 1))
            x1 = int(rng.integers(1, W - s - 1))
            y1 = int(rng.integers(1, H - s - 1))
            ext = (x1, y1, x1 + s, y1 + s)
            if any(_overlaps(ext, p, 3) for p in placed):
                continue
            placed.append(ext)
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            color = clutter_palette[int(rng.integers(len(clutter_palette)))]
            mask = shape_mask(shape, s, s)
            img[y1:y1 + s, x1:x1 + s][mask] = color
            clutter.append(_tight(mask, x1, y1))
            break
    return Scene(image=img, split=split, objects=objects, clutter=clutter)


def default_clutter_palette(split):
    """Colors of non-target objects; never equal to a category fill."""
    if split == "strong":
        return [(250, 200, 90), (210, 120, 120), (230, 230, 120), (180, 90, 40)]
    return [(90, 200, 250), (120, 120, 210), (120, 230, 230), (40, 90, 180)]
