"""Objectness-aware multiple-instance detection (Step 2) and its baselines.

Modes:

* ``ours`` - per image an object bag (top m% by objectness) and a distractor
  bag (the rest), ``K + 1`` outputs with channel 0 the distractor class.
* ``bwsd`` - one bag of all regions per image, ``K`` outputs.
* ``nodistractor`` - one bag of the top m% regions, ``K`` outputs.
* ``bmsd`` - ``bwsd`` fine-tuning starting from a trunk trained fully
  supervised on the strong split.

Class ids emitted by :func:`detect` are ``1..K`` in weak-category order; 0 is
reserved for the distractor/background channel and never emitted.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from msdet import diffcore as dc
from msdet.geom import BBox, Detection, label_regions, nms_arrays, score_order

log = logging.getLogger(__name__)

MODES = ("ours", "bwsd", "bmsd", "nodistractor")
MODE_ALIASES = {"oursmsd": "ours", "ours_msd": "ours", "b-wsd": "bwsd", "b-msd": "bmsd", "no_distractor": "nodistractor"}
AGGREGATIONS = ("exp_sum_log", "max")

_STREAM_INIT = 21
_STREAM_ORDER = 22
_STREAM_SUP = 23
_STREAM_MINE = 24


def canonical_mode(mode):
    m = str(mode).lower()
    m = MODE_ALIASES.get(m, m)
    if m not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return m


@dataclass(frozen=True)
class MilConfig:
    m_percent: float = 0.15
    aggregation: str = "exp_sum_log"
    weight_decay: float = 0.0005
    epochs: int = 20
    learning_rate: float = 0.001
    lr_after_drop: float = 0.0001
    lr_drop_fraction: float = 0.5
    momentum: float = 0.9
    hidden: int = 64
    nms_threshold: float = 0.3
    symmetric_bce: bool = True
    flip: bool = True
    supervised_iters: int = 2000
    supervised_lr: float = 0.01
    supervised_lr_after_drop: float = 0.001
    supervised_batch: int = 64
    mining_epochs: int = 10
    mining_lr: float = 5e-6
    mining_batch: int = 64

    def __post_init__(self):
        if not 0.0 < self.m_percent < 1.0:
            raise ValueError(f"m_percent must be in (0, 1), got {self.m_percent}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if not 0.0 < self.nms_threshold <= 1.0:
            raise ValueError(f"nms_threshold must be in (0, 1], got {self.nms_threshold}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**d)


class DetectorModel:
    """Trunk ``F -> hidden`` (ReLU) and a linear head with one logit per channel."""

    def __init__(self, params, mode, categories, has_background):
        self.params = params
        self.mode = mode
        self.categories = list(categories)
        self.has_background = bool(has_background)
        width = params["head.W"].shape[1]
        if width != self.num_outputs:
            raise ValueError(f"head width {width} does not match mode {mode!r} with {len(self.categories)} classes")

    @property
    def num_outputs(self):
        return len(self.categories) + (1 if self.has_background else 0)

    @property
    def offset(self):
        """Column of the first object category."""
        return 1 if self.has_background else 0

    @classmethod
    def init(cls, num_features, mode, categories, hidden=64, seed=0, has_background=None):
        if has_background is None:
            has_background = mode in ("ours", "supervised")
        out = len(categories) + (1 if has_background else 0)
        rng = np.random.default_rng([seed, _STREAM_INIT])
        p = dc.ParamStore()
        p.add("trunk.W0", dc.uniform_init(rng, num_features, hidden))
        p.add("trunk.b0", np.zeros(hidden))
        p.add("head.W", dc.uniform_init(rng, hidden, out) * 0.1)
        p.add("head.b", np.zeros(out))
        return cls(p, mode, categories, has_background)

    def logits(self, x):
        p = self.params
        h = dc.relu(dc.linear(x, p["trunk.W0"], p["trunk.b0"]))
        return dc.linear(h, p["head.W"], p["head.b"])


def region_logits(model, features):
    return model.logits(np.asarray(features, dtype=np.float64)).data


def class_scores(model, features):
    """Per-region scores ``[R, K]`` for the object categories (channel 0 dropped).

    MIL detectors use per-class sigmoids; supervised (softmax) detectors use
    softmax probabilities.
    """
    z = region_logits(model, features)
    if model.mode == "supervised":
        top = z.max(axis=1, keepdims=True)
        e = np.exp(z - top)
        p = e / e.sum(axis=1, keepdims=True)
        return p[:, model.offset:]
    return dc._sigmoid_np(z[:, model.offset:])


# ---------------------------------------------------------------- bags


def build_bags(n_regions, objectness_scores, m_percent):
    """Split regions into (object bag, distractor bag) index arrays.

    The top ``ceil(m * R)`` regions by objectness (ties to lower index) form
    the object bag. Both arrays are returned in ascending index order.
    """
    scores = np.asarray(objectness_scores, dtype=np.float64)
    if scores.shape != (n_regions,):
        raise ValueError(f"{scores.shape[0] if scores.ndim else 0} scores for {n_regions} regions")
    k = int(math.ceil(m_percent * n_regions - 1e-9))
    if k < 1 or k >= n_regions:
        raise ValueError(f"{n_regions} regions with m={m_percent} would leave a bag empty")
    order = score_order(scores)
    return np.sort(order[:k]), np.sort(order[k:])


def image_bags(mode, n_regions, objectness_scores, positive_classes, num_classes, m_percent):
    """Bags and ±1 label vectors for one image.

    ``positive_classes`` are 0-based weak-category indices. Returns a list of
    ``(region_indices, labels)``; labels have ``K + 1`` entries in ``ours``
    mode (entry 0 the distractor) and ``K`` otherwise.
    """
    mode = canonical_mode(mode)
    y = -np.ones(num_classes)
    y[list(positive_classes)] = 1.0
    if mode in ("bwsd", "bmsd"):
        return [(np.arange(n_regions), y)]
    obj, dis = build_bags(n_regions, objectness_scores, m_percent)
    if mode == "nodistractor":
        return [(obj, y)]
    y_obj = np.concatenate([[-1.0], y])
    y_dis = np.concatenate([[1.0], -np.ones(num_classes)])
    return [(obj, y_obj), (dis, y_dis)]


def bag_score(logits, bag, aggregation="exp_sum_log"):
    """Aggregate region logits ``[R, C]`` over the bag members into ``[C]``."""
    bag = np.asarray(bag, dtype=np.int64)
    if bag.size == 0:
        raise ValueError("bag is empty")
    rows = dc.take_rows(logits, bag)
    if aggregation == "exp_sum_log":
        return dc.exp_sum_log(rows)
    if aggregation == "max":
        return dc.max_agg(rows)
    raise ValueError(f"unknown aggregation {aggregation!r}")


def bag_loss(bag_scores, labels, lam=0.0, params=None, symmetric=False):
    """Bag cross-entropy with weight decay.

    ``(lam/2)||w||^2 - (1/n) sum_i sum_k 1{y_ki = 1} log sigmoid(s_ki)``.
    With ``symmetric`` the ``1{y_ki = -1} log(1 - sigmoid(s_ki))`` terms are
    added as well. ``bag_scores`` is a list of ``[C]`` tensors.
    """
    n = len(bag_scores)
    if n == 0:
        raise ValueError("bag_loss needs at least one bag")
    total = None
    for s, y in zip(bag_scores, labels):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != s.shape:
            raise ValueError(f"labels shape {y.shape} does not match bag score shape {s.shape}")
        if not np.all(np.abs(y) == 1.0):
            raise ValueError("bag labels must be -1 or +1")
        term = dc.weighted_sum(dc.softplus(dc.scale(s, -1.0)), (y == 1.0) / n)
        if symmetric:
            term = dc.add(term, dc.weighted_sum(dc.softplus(s), (y == -1.0) / n))
        total = term if total is None else dc.add(total, term)
    if lam and params is not None:
        for _, w in params.items():
            total = dc.add(total, dc.scale(dc.sum_squares(w), 0.5 * lam))
    return total


def mil_loss(model, features, bags, aggregation, symmetric, lam=0.0):
    logits = model.logits(features)
    scores = [bag_score(logits, idx, aggregation) for idx, _ in bags]
    return bag_loss(scores, [y for _, y in bags], lam, model.params if lam else None, symmetric)


# ---------------------------------------------------------------- training


def _weak_class_indices(store, image, categories):
    pos = {c: k for k, c in enumerate(categories)}
    return sorted(pos[c] for c in store.image_labels(image) if c in pos)


def _flip(store, x, rng, enabled):
    flip = rng.random() < 0.5
    if enabled and flip and store.standardizer is not None:
        return store.standardizer.flip(x)
    return x


def _lr(cfg_lr, cfg_after, drop_fraction, step, total):
    return cfg_lr if step < int(total * drop_fraction) else cfg_after


def train_detector(mode, store, objectness_scores=None, cfg=None, seed=0, images=None, init_params=None):
    """Train a MIL detector on the weak split; returns ``(model, history)``.

    ``objectness_scores`` maps image index to per-region scores and is
    required by ``ours``/``nodistractor``. ``init_params`` (a ParamStore with
    ``trunk.*`` entries) is required by ``bmsd``.
    """
    mode = canonical_mode(mode)
    cfg = cfg or MilConfig()
    if mode in ("ours", "nodistractor") and objectness_scores is None:
        raise ValueError(f"mode {mode!r} requires objectness scores from a trained objectness model")
    if mode == "bmsd" and init_params is None:
        raise ValueError("mode 'bmsd' requires a supervised detector trained on the strong split")
    if mode == "bwsd" and objectness_scores is not None:
        objectness_scores = None
    categories = list(store.weak_categories)
    K = len(categories)
    if images is None:
        images = store.images("weak")
    images = np.asarray(images, dtype=np.int64)
    model = DetectorModel.init(store.num_features, mode, categories, cfg.hidden, seed)
    if init_params is not None:
        for name in ("trunk.W0", "trunk.b0"):
            if init_params[name].shape != model.params[name].shape:
                raise ValueError(f"init parameter {name} has shape {init_params[name].shape}")
            model.params[name].data = init_params[name].data.copy()
    bags_by_image = {}
    for i in images:
        n = store.offsets[i + 1] - store.offsets[i]
        scores = objectness_scores[int(i)] if objectness_scores is not None else None
        bags_by_image[int(i)] = image_bags(mode, int(n), scores, _weak_class_indices(store, i, categories), K,
                                           cfg.m_percent)
    sgd = dc.SgdConfig(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([seed, _STREAM_ORDER])
    feats = store.features
    total_steps = cfg.epochs * len(images)
    history = {"loss": [], "penalty": []}
    step = 0
    for epoch in range(cfg.epochs):
        for i in rng.permutation(images):
            sl = store.region_slice(int(i))
            x = _flip(store, feats[sl], rng, cfg.flip)
            model.params.zero_grad()
            with dc.Tape() as tape:
                loss = mil_loss(model, x, bags_by_image[int(i)], cfg.aggregation, cfg.symmetric_bce)
            value = dc.backward(tape, loss)
            if not np.isfinite(value):
                raise dc.TrainingDiverged(f"detector training diverged at epoch {epoch}, step {step}")
            dc.sgd_step(model.params, None, sgd,
                        lr=_lr(cfg.learning_rate, cfg.lr_after_drop, cfg.lr_drop_fraction, step, total_steps))
            history["loss"].append(value)
            history["penalty"].append(0.5 * cfg.weight_decay * model.params.sq_norm())
            step += 1
    return model, history


def _labeled_pools(store, images, gt_getter, categories):
    """Per-image (fg indices, fg classes, bg indices) under the IoU rules."""
    cls_of = {c: k + 1 for k, c in enumerate(categories)}
    out = []
    for i in images:
        gt_boxes, gt_cats = gt_getter(int(i))
        sl = store.region_slice(int(i))
        idx = np.arange(sl.start, sl.stop)
        labels, _, best = label_regions(store.boxes[sl], gt_boxes)
        fg = labels == 1
        classes = np.array([cls_of[gt_cats[b]] for b in best[fg]], dtype=np.int64)
        out.append((idx[fg], classes, idx[labels == 0]))
    return out


def train_supervised(store, images, gt_getter, categories, cfg=None, seed=0):
    """Per-region softmax classifier over background + ``categories``.

    Regions with IoU >= 0.5 take the class of their best ground truth,
    regions with max IoU in [0.1, 0.5) are background, the rest are ignored.
    No box regression.
    """
    cfg = cfg or MilConfig()
    pools = _labeled_pools(store, images, gt_getter, categories)
    all_fg = np.concatenate([p[0] for p in pools]) if pools else np.zeros(0, dtype=np.int64)
    all_fg_cls = np.concatenate([p[1] for p in pools]) if pools else np.zeros(0, dtype=np.int64)
    all_bg = np.concatenate([p[2] for p in pools]) if pools else np.zeros(0, dtype=np.int64)
    if all_fg.size == 0 or all_bg.size == 0:
        raise ValueError("supervised training needs both foreground and background regions")
    cls_lookup = dict(zip(all_fg.tolist(), all_fg_cls.tolist()))
    model = DetectorModel.init(store.num_features, "supervised", categories, cfg.hidden, seed, has_background=True)
    sgd = dc.SgdConfig(cfg.supervised_lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([seed, _STREAM_SUP])
    n_fg = cfg.supervised_batch // 4
    n_bg = cfg.supervised_batch - n_fg
    feats = store.features
    history = {"loss": []}
    for it in range(cfg.supervised_iters):
        pick = rng.choice(len(pools), size=min(2, len(pools)), replace=False)
        local_fg = np.concatenate([pools[j][0] for j in pick])
        local_bg = np.concatenate([pools[j][2] for j in pick])
        fg = local_fg[rng.choice(len(local_fg), n_fg, replace=False)] if len(local_fg) >= n_fg else \
            np.concatenate([local_fg, rng.choice(all_fg, n_fg - len(local_fg), replace=True)])
        bg = local_bg[rng.choice(len(local_bg), n_bg, replace=False)] if len(local_bg) >= n_bg else \
            np.concatenate([local_bg, rng.choice(all_bg, n_bg - len(local_bg), replace=True)])
        rows = np.concatenate([fg, bg])
        targets = np.concatenate([[cls_lookup[int(r)] for r in fg], np.zeros(n_bg, dtype=np.int64)]).astype(np.int64)
        model.params.zero_grad()
        with dc.Tape() as tape:
            loss = dc.softmax_cross_entropy(model.logits(feats[rows]), targets)
        value = dc.backward(tape, loss)
        if not np.isfinite(value):
            raise dc.TrainingDiverged(f"supervised training diverged at iteration {it}")
        dc.sgd_step(model.params, None, sgd, lr=_lr(cfg.supervised_lr, cfg.supervised_lr_after_drop, 0.5, it,
                                                     cfg.supervised_iters))
        history["loss"].append(value)
    return model, history


def train_bmsd(store, cfg=None, seed=0, images=None):
    """B-MSD: supervised detector on the strong split, then B-WSD fine-tuning."""
    strong = store.images("strong")
    sup, _ = train_supervised(store, strong, store.gt_for_training, store.strong_categories, cfg, seed)
    return train_detector("bmsd", store, None, cfg, seed, images=images, init_params=sup.params)


# ---------------------------------------------------------------- inference


def detect_arrays(model, boxes, features, nms_threshold=0.3, max_per_class=None):
    """NMS-filtered detections as arrays ``(class_ids, scores, boxes)``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 4))
    s = class_scores(model, features)
    R, K = s.shape
    cls = np.repeat(np.arange(1, K + 1)[None, :], R, axis=0).reshape(-1)
    sc = s.reshape(-1)
    bx = np.repeat(boxes, K, axis=0)
    if max_per_class is not None:
        keep_pre = []
        for k in range(K):
            col = np.arange(k, R * K, K)
            keep_pre.append(col[score_order(sc[col])[:max_per_class]])
        sel = np.sort(np.concatenate(keep_pre))
        cls, sc, bx = cls[sel], sc[sel], bx[sel]
    keep = nms_arrays(bx, sc, cls, nms_threshold)
    return cls[keep], sc[keep], bx[keep]


def detect(model, boxes, features, cfg=None, image_id=0):
    cfg = cfg or MilConfig()
    cls, sc, bx = detect_arrays(model, boxes, features, cfg.nms_threshold)
    return [Detection(BBox.from_array(b), float(s), int(c), image_id) for c, s, b in zip(cls, sc, bx)]


def detect_store(model, store, images, cfg=None, max_per_class=None):
    """Detections for many images as one array table.

    Returns a dict with ``image`` (store index), ``class_id``, ``score`` and
    ``box`` arrays, images in the order given.
    """
    cfg = cfg or MilConfig()
    out = {"image": [], "class_id": [], "score": [], "box": []}
    for i in images:
        sl = store.region_slice(int(i))
        c, s, b = detect_arrays(model, store.boxes[sl], store.features[sl], cfg.nms_threshold, max_per_class)
        out["image"].append(np.full(c.shape[0], int(i), dtype=np.int64))
        out["class_id"].append(c)
        out["score"].append(s)
        out["box"].append(b)
    return {k: (np.concatenate(v) if v else np.zeros((0, 4) if k == "box" else 0)) for k, v in out.items()}


def top_regions(model, store, images):
    """Per image the index (within the image) of the best region for every class: ``{image: [K]}``."""
    out = {}
    for i in images:
        s = class_scores(model, store.region_features(int(i)))
        out[int(i)] = np.argmax(s, axis=0)
    return out


def pseudo_gt_select(model, store, images=None):
    """One pseudo ground-truth box per image and image-level category.

    Returns ``{image: (boxes [n, 4], category names)}``; the box is the
    region with the highest score for that category (ties to lower index).
    """
    if images is None:
        images = store.images("weak")
    cat_index = {c: k for k, c in enumerate(model.categories)}
    out = {}
    for i in images:
        cats = [c for c in store.image_labels(int(i)) if c in cat_index]
        if not cats:
            continue
        s = class_scores(model, store.region_features(int(i)))
        rb = store.region_boxes(int(i))
        boxes = np.array([rb[int(np.argmax(s[:, cat_index[c]]))] for c in cats]).reshape(-1, 4)
        out[int(i)] = (boxes, tuple(cats))
    return out


def retrain_supervised(pseudo_gts, store, cfg=None, seed=0):
    """Supervised detector trained on weak images labeled against pseudo ground truth."""
    covered = {c for _, cats in pseudo_gts.values() for c in cats}
    missing = [c for c in store.weak_categories if c not in covered]
    if missing:
        raise ValueError(f"pseudo ground truth covers no image of categories {missing}")
    images = sorted(pseudo_gts)
    model, _ = train_supervised(store, images, lambda i: pseudo_gts[i], store.weak_categories, cfg, seed)
    return model


def hard_negative_mine(model, store, cfg=None, seed=0, images=None):
    """Fine-tune ``model`` on per-category top regions with mined hard negatives.

    For each category the best-scoring region of every training image is
    taken; those of images with the category are positives, those of images
    without it are ranked by score and the top ``3 x #positives`` kept. The
    detector is then fine-tuned at a fixed learning rate. Returns
    ``(new_model, mined)`` where ``mined`` maps category to
    ``(positives, negatives)`` global region indices.
    """
    cfg = cfg or MilConfig()
    if images is None:
        images = store.images("weak")
    images = np.asarray(images, dtype=np.int64)
    new = DetectorModel(model.params.copy(), model.mode, model.categories, model.has_background)
    for name in new.params.names():
        new.params.momentum(name)[...] = 0.0
    K = len(model.categories)
    best_local = top_regions(model, store, images)
    mined = {}
    rows, chans, labels = [], [], []
    for k, cat in enumerate(model.categories):
        pos, neg, neg_scores = [], [], []
        for i in images:
            local = int(best_local[int(i)][k])
            glob = int(store.offsets[i]) + local
            if cat in store.image_labels(int(i)):
                pos.append(glob)
            else:
                neg.append(glob)
        if not pos:
            log.warning("hard negative mining: category %s has no positive image; skipped", cat)
            continue
        if neg:
            s = class_scores(model, store.features[np.array(neg)])[:, k]
            neg = [neg[j] for j in score_order(s)[: 3 * len(pos)]]
        mined[cat] = (np.array(pos, dtype=np.int64), np.array(neg, dtype=np.int64))
        rows += pos + neg
        chans += [k + model.offset] * (len(pos) + len(neg))
        labels += [1.0] * len(pos) + [0.0] * len(neg)
    if not rows:
        return new, mined
    rows = np.array(rows, dtype=np.int64)
    chans = np.array(chans, dtype=np.int64)
    labels = np.array(labels)
    sgd = dc.SgdConfig(cfg.mining_lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([seed, _STREAM_MINE])
    feats = store.features
    width = new.num_outputs
    for _ in range(cfg.mining_epochs):
        order = rng.permutation(len(rows))
        for start in range(0, len(order), cfg.mining_batch):
            sel = order[start:start + cfg.mining_batch]
            n = len(sel)
            pos_mask = np.zeros((n, width))
            neg_mask = np.zeros((n, width))
            pos_mask[np.arange(n), chans[sel]] = labels[sel] / n
            neg_mask[np.arange(n), chans[sel]] = (1.0 - labels[sel]) / n
            new.params.zero_grad()
            with dc.Tape() as tape:
                z = new.logits(feats[rows[sel]])
                loss = dc.add(dc.weighted_sum(dc.softplus(dc.scale(z, -1.0)), pos_mask),
                              dc.weighted_sum(dc.softplus(z), neg_mask))
            dc.backward(tape, loss)
            dc.sgd_step(new.params, None, sgd)
    return new, mined


# ---------------------------------------------------------------- checkpoints


def save_detector(path, model, seed=0, step=0, config=None):
    return dc.save_checkpoint(path, model.params, kind="detector", mode=model.mode, categories=model.categories,
                              has_background=model.has_background, seed=seed, step=step,
                              config=(config.to_dict() if config is not None else None))


def load_detector(path):
    params, header = dc.load_checkpoint(path)
    if header.get("kind") != "detector":
        raise ValueError(f"{path}: not a detector checkpoint (kind={header.get('kind')!r})")
    return DetectorModel(params, header["mode"], header["categories"], header["has_background"])
