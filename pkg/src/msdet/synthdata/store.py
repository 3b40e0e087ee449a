"""Region stores, dataset generation and on-disk formats."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from msdet.geom import BBox
from msdet.synthdata.features import NUM_FEATURES, Standardizer, extract_features
from msdet.synthdata.proposals import ProposalConfig, propose_regions
from msdet.synthdata.render import (
    SPLITS,
    STREAM_LAYOUT,
    CategorySpec,
    SceneObject,
    default_categories,
    default_clutter_palette,
    render_scene,
    stream,
)


class WeakBoxAccessError(PermissionError):
    """Ground-truth boxes of a non-strong split were requested for training."""


@dataclass(frozen=True)
class DataConfig:
    n_strong: int = 6
    n_weak: int = 6
    shared_fills: bool = True
    categories: tuple = ()  # explicit CategorySpec dicts; overrides the default catalog
    scenes_strong: int = 200
    scenes_weak: int = 200
    scenes_test: int = 200
    canvas: int = 144
    objects_min: int = 1
    objects_max: int = 3
    object_size_min: int = 22
    object_size_max: int = 34
    part_size: float = 0.38
    context_width: float = 1.5
    context_height: float = 0.7
    domain_tint: int = 12
    clutter_min: int = 1
    clutter_max: int = 3
    clutter_size_min: int = 12
    clutter_size_max: int = 28
    edge_threshold: float = 24.0
    ring_frac: float = 0.25
    flip: bool = True
    heldout_fraction: float = 0.1
    proposals: ProposalConfig = field(default_factory=ProposalConfig)

    def __post_init__(self):
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ValueError("need 1 <= objects_min <= objects_max")
        if not 0.0 <= self.heldout_fraction < 0.5:
            raise ValueError(f"heldout_fraction must be in [0, 0.5), got {self.heldout_fraction}")

    def scene_counts(self):
        return {"strong": self.scenes_strong, "weak": self.scenes_weak, "test": self.scenes_test}

    def category_specs(self):
        if self.categories:
            strong, weak = [], []
            for d in self.categories:
                spec = CategorySpec.from_dict(d)
                (strong if d.get("split", "weak") == "strong" else weak).append(spec)
        else:
            strong, weak = default_categories(self.n_strong, self.n_weak, self.shared_fills)
        overlap = {c.name for c in strong} & {c.name for c in weak}
        if overlap:
            raise ValueError(f"strong and weak categories must be disjoint; shared: {sorted(overlap)}")
        if len(strong) < 2 or len(weak) < 2:
            raise ValueError("need at least 2 strong and 2 weak categories")
        return strong, weak

    def to_dict(self):
        d = asdict(self)
        d["proposals"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["proposals"].items()}
        d["categories"] = [dict(c) for c in self.categories]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        if "proposals" in d:
            p = dict(d["proposals"])
            pknown = {f.name for f in fields(ProposalConfig)}
            bad = set(p) - pknown
            if bad:
                raise ValueError(f"unknown proposal config keys: {sorted(bad)}")
            for k in ("grid_sizes", "grid_aspects"):
                if k in p:
                    p[k] = tuple(p[k])
            d["proposals"] = ProposalConfig(**p)
        if "categories" in d:
            d["categories"] = tuple(dict(c) for c in d["categories"])
        return cls(**d)


class RegionStore:
    """Per-image proposals and descriptors plus split-guarded annotations.

    Images are indexed ``0..n-1``; regions of image ``i`` occupy rows
    ``offsets[i]:offsets[i+1]``. Ground-truth boxes of weak and test images are
    reachable only through :meth:`gt_for_evaluation`; every access is counted
    in :attr:`audit`.
    """

    def __init__(self, image_keys, splits, labels, gt_boxes, gt_labels, boxes, image_index, raw_features,
                 strong_categories, weak_categories, standardizer=None):
        self.image_keys = list(image_keys)
        self.splits = list(splits)
        for i, s in enumerate(self.splits):
            if s not in SPLITS:
                raise ValueError(f"image {self.image_keys[i]!r}: unknown split {s!r}")
        self.labels = [tuple(l) for l in labels]
        self._gt_boxes = [np.asarray(b, dtype=np.float64).reshape(-1, 4) for b in gt_boxes]
        self._gt_labels = [tuple(l) for l in gt_labels]
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        self.image_index = np.asarray(image_index, dtype=np.int64)
        self.raw_features = np.asarray(raw_features, dtype=np.float64).reshape(self.boxes.shape[0], -1)
        if self.image_index.size and np.any(np.diff(self.image_index) < 0):
            raise ValueError("regions must be grouped by image in ascending image order")
        n = len(self.image_keys)
        counts = np.bincount(self.image_index, minlength=n) if n else np.zeros(0, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.strong_categories = list(strong_categories)
        self.weak_categories = list(weak_categories)
        self.audit = {"training": {s: 0 for s in SPLITS}, "evaluation": {s: 0 for s in SPLITS}}
        self.standardizer = standardizer
        self._features = None

    # ------------------------------------------------------------ basics
    def __len__(self):
        return len(self.image_keys)

    @property
    def num_features(self):
        return self.raw_features.shape[1]

    @property
    def num_regions(self):
        return self.boxes.shape[0]

    def fit_standardizer(self):
        strong_rows = np.isin(self.image_index, self.images("strong"))
        if not strong_rows.any():
            raise ValueError("cannot standardize: no strong-split regions")
        self.standardizer = Standardizer.fit(self.raw_features[strong_rows])
        self._features = None
        return self.standardizer

    @property
    def features(self):
        if self._features is None:
            if self.standardizer is None:
                self.fit_standardizer()
            self._features = self.standardizer.transform(self.raw_features)
        return self._features

    def images(self, split):
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def region_slice(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def region_boxes(self, i):
        return self.boxes[self.region_slice(i)]

    def region_features(self, i):
        return self.features[self.region_slice(i)]

    def image_labels(self, i):
        return self.labels[i]

    def heldout_split(self, split, fraction):
        """Deterministic (train, heldout) partition of a split's image ids."""
        ids = self.images(split)
        k = int(round(len(ids) * fraction))
        if k == 0:
            return ids, ids[:0]
        return ids[:-k], ids[-k:]

    # ------------------------------------------------------------ guarded GT
    def gt_for_training(self, i):
        split = self.splits[i]
        self.audit["training"][split] += 1
        if split != "strong":
            raise WeakBoxAccessError(f"image {self.image_keys[i]!r} is in split {split!r}; boxes are not available for training")
        return self._gt_boxes[i], self._gt_labels[i]

    def gt_for_evaluation(self, i):
        self.audit["evaluation"][self.splits[i]] += 1
        return self._gt_boxes[i], self._gt_labels[i]

    def weak_training_reads(self):
        return self.audit["training"]["weak"] + self.audit["training"]["test"]

    def equal(self, other):
        return (
            self.image_keys == other.image_keys
            and self.splits == other.splits
            and self.labels == other.labels
            and self._gt_labels == other._gt_labels
            and all(np.array_equal(a, b) for a, b in zip(self._gt_boxes, other._gt_boxes))
            and np.array_equal(self.boxes, other.boxes, equal_nan=True)
            and np.array_equal(self.image_index, other.image_index)
            and np.array_equal(self.raw_features, other.raw_features)
        )


class SceneDataset(RegionStore):
    """A :class:`RegionStore` backed by rendered synthetic scenes."""

    def __init__(self, config, seed, strong_specs, weak_specs, images, scenes_meta, **kw):
        super().__init__(**kw)
        self.config = config
        self.seed = seed
        self.strong_specs = list(strong_specs)
        self.weak_specs = list(weak_specs)
        self.images_array = images
        self.scenes_meta = scenes_meta  # per image: list of {category, part_box, context_box}; clutter boxes

    def image(self, i):
        return self.images_array[i]

    def distractor_boxes(self, i):
        """Part and context boxes of image ``i`` (analysis only; counts as evaluation access)."""
        self.audit["evaluation"][self.splits[i]] += 1
        meta = self.scenes_meta[i]
        return (np.array([o["part_box"] for o in meta["objects"]], dtype=np.float64).reshape(-1, 4),
                np.array([o["context_box"] for o in meta["objects"]], dtype=np.float64).reshape(-1, 4))


def _render_one(args):
    cfg, seed, split_id, idx, cats = args
    split = SPLITS[split_id]
    palette = default_clutter_palette(split)
    rng = stream(seed, STREAM_LAYOUT, split_id, idx)
    scene = render_scene(rng, split, cats, cfg.canvas, cfg, palette)
    boxes = propose_regions(scene.image, cfg.proposals, seed=seed, key=(split_id, idx))
    raw = extract_features(scene.image, boxes, cfg.edge_threshold, cfg.ring_frac)
    return scene, boxes, raw


def generate_dataset(config=None, seed=0, threads=1):
    """Render every split, propose regions and compute standardized descriptors."""
    config = config or DataConfig()
    strong_specs, weak_specs = config.category_specs()
    jobs = []
    for split_id, split in enumerate(SPLITS):
        cats = strong_specs if split == "strong" else weak_specs
        for idx in range(config.scene_counts()[split]):
            jobs.append((config, seed, split_id, idx, cats))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_render_one, jobs))
    else:
        results = [_render_one(j) for j in jobs]
    keys, splits, labels, gtb, gtl, metas = [], [], [], [], [], []
    boxes, image_index, raw = [], [], []
    images = np.zeros((len(results), config.canvas, config.canvas, 3), dtype=np.uint8)
    for i, (scene, b, f) in enumerate(results):
        keys.append(i)
        splits.append(scene.split)
        labels.append(scene.labels)
        gtb.append(np.array([o.box.as_array() for o in scene.objects]).reshape(-1, 4))
        gtl.append(tuple(o.category for o in scene.objects))
        metas.append({
            "objects": [{"category": o.category, "part_box": o.part_box.as_array().tolist(),
                         "context_box": o.context_box.as_array().tolist()} for o in scene.objects],
            "clutter": [c.as_array().tolist() for c in scene.clutter],
        })
        images[i] = scene.image
        boxes.append(b)
        image_index.append(np.full(b.shape[0], i, dtype=np.int64))
        raw.append(f)
    ds = SceneDataset(
        config, seed, strong_specs, weak_specs, images, metas,
        image_keys=keys, splits=splits, labels=labels, gt_boxes=gtb, gt_labels=gtl,
        boxes=np.concatenate(boxes) if boxes else np.zeros((0, 4)),
        image_index=np.concatenate(image_index) if image_index else np.zeros(0, dtype=np.int64),
        raw_features=np.concatenate(raw) if raw else np.zeros((0, NUM_FEATURES)),
        strong_categories=[c.name for c in strong_specs],
        weak_categories=[c.name for c in weak_specs],
    )
    ds.fit_standardizer()
    return ds


# ---------------------------------------------------------------- persistence


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def save_dataset(ds, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", ds.images_array)
    np.save(out / "boxes.npy", ds.boxes)
    np.save(out / "image_index.npy", ds.image_index)
    np.save(out / "features_raw.npy", ds.raw_features)
    annotations = [
        {"key": k, "split": s, "labels": list(l), "gt_boxes": g.tolist(), "gt_labels": list(gl), "meta": m}
        for k, s, l, g, gl, m in zip(ds.image_keys, ds.splits, ds.labels, ds._gt_boxes, ds._gt_labels, ds.scenes_meta)
    ]
    _dump_json(out / "annotations.json", annotations)
    manifest = {
        "format": "msdet-dataset-v1",
        "seed": ds.seed,
        "num_features": ds.num_features,
        "categories": {"strong": [c.to_dict() for c in ds.strong_specs], "weak": [c.to_dict() for c in ds.weak_specs]},
        "splits": {s: int(len(ds.images(s))) for s in SPLITS},
        "num_regions": int(ds.num_regions),
        "config": ds.config.to_dict(),
        "standardizer": ds.standardizer.to_dict(),
    }
    _dump_json(out / "manifest.json", manifest)
    return out


def load_dataset(data_dir):
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != "msdet-dataset-v1":
        raise ValueError(f"{d}: not a dataset directory (manifest format {manifest.get('format')!r})")
    ann = json.loads((d / "annotations.json").read_text(encoding="utf-8"))
    strong_specs = [CategorySpec.from_dict(c) for c in manifest["categories"]["strong"]]
    weak_specs = [CategorySpec.from_dict(c) for c in manifest["categories"]["weak"]]
    ds = SceneDataset(
        DataConfig.from_dict(manifest["config"]), manifest["seed"], strong_specs, weak_specs,
        np.load(d / "images.npy"), [a["meta"] for a in ann],
        image_keys=[a["key"] for a in ann], splits=[a["split"] for a in ann], labels=[a["labels"] for a in ann],
        gt_boxes=[a["gt_boxes"] for a in ann], gt_labels=[a["gt_labels"] for a in ann],
        boxes=np.load(d / "boxes.npy"), image_index=np.load(d / "image_index.npy"),
        raw_features=np.load(d / "features_raw.npy"),
        strong_categories=[c.name for c in strong_specs], weak_categories=[c.name for c in weak_specs],
        standardizer=Standardizer.from_dict(manifest["standardizer"]),
    )
    return ds


def load_store(path):
    """Dataset directory or feature-exchange file, whichever ``path`` is."""
    p = Path(path)
    if p.is_dir():
        return load_dataset(p)
    return ingest_external_features(p)


# ---------------------------------------------------------------- exchange format


def export_features(store, path):
    """One JSON record per region; ground truth rides on each image's first record."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(store)):
            sl = store.region_slice(i)
            gt_b, gt_l = store._gt_boxes[i], store._gt_labels[i]
            for r in range(sl.start, sl.stop):
                rec = {
                    "image_id": store.image_keys[i],
                    "split": store.splits[i],
                    "image_labels": list(store.labels[i]),
                    "features": store.raw_features[r].tolist(),
                }
                box = store.boxes[r]
                if np.all(np.isfinite(box)):
                    rec["box"] = box.tolist()
                if r == sl.start and len(gt_l):
                    rec["gt_boxes"] = gt_b.tolist()
                    rec["gt_labels"] = list(gt_l)
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")


def ingest_external_features(path):
    """Parse a feature-exchange file into a :class:`RegionStore`.

    Records of one image must be contiguous. Errors name the offending line.
    """
    keys, splits, labels, gtb, gtl = [], [], [], [], []
    boxes, image_index, feats = [], [], []
    key_pos = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from None
            split = rec.get("split")
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split tag {split!r}")
            f = rec.get("features")
            if not isinstance(f, list) or not f:
                raise ValueError(f"{path}:{lineno}: missing feature vector")
            if dim is None:
                dim = len(f)
            elif len(f) != dim:
                raise ValueError(f"{path}:{lineno}: feature dimension {len(f)} differs from {dim}")
            f = [float(v) for v in f]
            if not all(math.isfinite(v) for v in f):
                raise ValueError(f"{path}:{lineno}: non-finite feature value")
            box = rec.get("box")
            if box is None:
                if split != "weak":
                    raise ValueError(f"{path}:{lineno}: box is required for split {split!r}")
                box = [math.nan] * 4
            elif len(box) != 4 or not all(math.isfinite(float(v)) for v in box):
                raise ValueError(f"{path}:{lineno}: box must be 4 finite numbers")
            key = rec.get("image_id")
            if key not in key_pos:
                key_pos[key] = len(keys)
                keys.append(key)
                splits.append(split)
                labels.append(tuple(rec.get("image_labels", ())))
                gtb.append(np.zeros((0, 4)))
                gtl.append(())
            elif key_pos[key] != len(keys) - 1:
                raise ValueError(f"{path}:{lineno}: records of image {key!r} are not contiguous")
            idx = key_pos[key]
            if splits[idx] != split:
                raise ValueError(f"{path}:{lineno}: image {key!r} changes split")
            if "gt_boxes" in rec:
                gb = np.asarray(rec["gt_boxes"], dtype=np.float64).reshape(-1, 4)
                gl = tuple(rec.get("gt_labels", ()))
                if len(gl) != gb.shape[0]:
                    raise ValueError(f"{path}:{lineno}: gt_boxes and gt_labels differ in length")
                gtb[idx] = gb
                gtl[idx] = gl
            boxes.append([float(v) for v in box])
            image_index.append(idx)
            feats.append(f)
    strong = sorted({c for l, s in zip(labels, splits) if s == "strong" for c in l})
    weak = sorted({c for l, s in zip(labels, splits) if s != "strong" for c in l} - set(strong))
    store = RegionStore(
        keys, splits, labels, gtb, gtl,
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(image_index, dtype=np.int64),
        np.asarray(feats, dtype=np.float64).reshape(len(boxes), dim or 0),
        strong, weak,
    )
    if len(store.images("strong")):
        store.fit_standardizer()
    return store
