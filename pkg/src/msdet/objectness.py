"""Domain-invariant objectness learning (Step 1).

A shared trunk maps region descriptors to an embedding ``f``. The objectness
head is trained on balanced labeled strong regions; the domain head sees
random strong and weak regions through a gradient-reversal node, so the trunk
is pushed to make the two domains indistinguishable.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from msdet import diffcore as dc
from msdet.geom import label_regions

log = logging.getLogger(__name__)

VARIANT_DOMAIN_INVARIANT = "domain_invariant"
VARIANT_ORIGINAL = "original"

# RNG stream ids for this stage
_STREAM_TRUNK_INIT = 11
_STREAM_HEAD_INIT = 12
_STREAM_DOMAIN_INIT = 13
_STREAM_BATCHES = 14
_STREAM_PROBE = 15


@dataclass(frozen=True)
class GrlSchedule:
    lambda_max: float = 0.1
    ramp_iters: int = 800

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.ramp_iters < 0:
            raise ValueError(f"ramp_iters must be >= 0, got {self.ramp_iters}")


def grl_lambda(iteration, sched):
    """Linear ramp from 0 to ``lambda_max`` over ``ramp_iters`` iterations."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if sched.ramp_iters == 0:
        return sched.lambda_max
    return min(iteration / sched.ramp_iters, 1.0) * sched.lambda_max


@dataclass(frozen=True)
class ObjectnessConfig:
    embed_dim: int = 32
    hidden: int = 64
    domain_hidden: tuple = (64, 64)
    batch_unit: int = 64
    positive_fraction: float = 0.25
    images_per_batch: int = 2
    maxiter: int = 8000
    learning_rate: float = 0.01
    lr_after_drop: float = 0.001
    lr_drop_fraction: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lambda_max: float = 0.1
    ramp_iters: int = 800
    domain_adaptation: bool = True
    flip: bool = True

    def __post_init__(self):
        if self.batch_unit < 4:
            raise ValueError("batch_unit must be >= 4")
        npos = self.batch_unit * self.positive_fraction
        if abs(npos - round(npos)) > 1e-9:
            raise ValueError("batch_unit * positive_fraction must be an integer")

    @property
    def variant(self):
        return VARIANT_DOMAIN_INVARIANT if self.domain_adaptation else VARIANT_ORIGINAL

    @property
    def schedule(self):
        return GrlSchedule(self.lambda_max, self.ramp_iters)

    def to_dict(self):
        d = asdict(self)
        d["domain_hidden"] = list(self.domain_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown objectness config keys: {sorted(unknown)}")
        d = dict(d)
        if "domain_hidden" in d:
            d["domain_hidden"] = tuple(d["domain_hidden"])
        return cls(**d)


class ObjectnessModel:
    """Trunk ``F -> hidden -> d``, objectness head ``d -> 1``, optional domain head."""

    def __init__(self, params, num_features, cfg):
        self.params = params
        self.num_features = num_features
        self.cfg = cfg
        if ("dom.W0" in params) != cfg.domain_adaptation:
            raise ValueError("domain head must be present exactly when domain adaptation is enabled")

    @property
    def variant(self):
        return self.cfg.variant

    @classmethod
    def init(cls, num_features, cfg, seed=0):
        p = dc.ParamStore()
        rng = np.random.default_rng([seed, _STREAM_TRUNK_INIT])
        p.add("trunk.W0", dc.uniform_init(rng, num_features, cfg.hidden))
        p.add("trunk.b0", np.zeros(cfg.hidden))
        p.add("trunk.W1", dc.uniform_init(rng, cfg.hidden, cfg.embed_dim))
        p.add("trunk.b1", np.zeros(cfg.embed_dim))
        rng = np.random.default_rng([seed, _STREAM_HEAD_INIT])
        p.add("obj.W", dc.uniform_init(rng, cfg.embed_dim, 1) * 0.1)
        p.add("obj.b", np.zeros(1))
        if cfg.domain_adaptation:
            add_domain_head(p, "dom", cfg.embed_dim, cfg.domain_hidden, np.random.default_rng([seed, _STREAM_DOMAIN_INIT]))
        return cls(p, num_features, cfg)

    @classmethod
    def zeros(cls, num_features, cfg):
        model = cls.init(num_features, cfg)
        for _, t in model.params.items():
            t.data[...] = 0.0
        return model

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.num_features:
            raise ValueError(f"expected {self.num_features} features per region, got {x.shape[1]}")
        return x

    def embed(self, x):
        p = self.params
        h = dc.relu(dc.linear(x, p["trunk.W0"], p["trunk.b0"]))
        return dc.relu(dc.linear(h, p["trunk.W1"], p["trunk.b1"]))

    def objectness_logits(self, f):
        return dc.linear(f, self.params["obj.W"], self.params["obj.b"])

    def domain_logits(self, f):
        return domain_head_logits(self.params, "dom", f, len(self.cfg.domain_hidden))


def add_domain_head(params, prefix, in_dim, hidden, rng):
    dims = [in_dim, *hidden, 1]
    for k in range(len(dims) - 1):
        params.add(f"{prefix}.W{k}", dc.uniform_init(rng, dims[k], dims[k + 1]))
        params.add(f"{prefix}.b{k}", np.zeros(dims[k + 1]))


def domain_head_logits(params, prefix, f, n_hidden):
    h = f
    for k in range(n_hidden):
        h = dc.relu(dc.linear(h, params[f"{prefix}.W{k}"], params[f"{prefix}.b{k}"]))
    return dc.linear(h, params[f"{prefix}.W{n_hidden}"], params[f"{prefix}.b{n_hidden}"])


def objectness_score(model, features):
    """Objectness probability per region (pure; no tape)."""
    x = model._check(features)
    logits = model.objectness_logits(model.embed(x)).data[:, 0]
    return dc._sigmoid_np(logits)


def domain_probability(model, features):
    if not model.cfg.domain_adaptation:
        raise ValueError("model has no domain head (original variant)")
    x = model._check(features)
    return dc._sigmoid_np(model.domain_logits(model.embed(x)).data[:, 0])


# ---------------------------------------------------------------- batches


@dataclass
class ObjectnessPools:
    """Region index pools for Step 1, built from training images only."""

    pos_by_image: list
    neg_by_image: list
    all_pos: np.ndarray
    all_neg: np.ndarray
    strong_regions: np.ndarray
    weak_regions: np.ndarray


def build_pools(store, strong_images, weak_images):
    pos_by, neg_by = [], []
    for i in strong_images:
        gt, _ = store.gt_for_training(int(i))
        sl = store.region_slice(int(i))
        labels, _, _ = label_regions(store.boxes[sl], gt)
        idx = np.arange(sl.start, sl.stop)
        pos_by.append(idx[labels == 1])
        neg_by.append(idx[labels == 0])
    all_pos = np.concatenate(pos_by) if pos_by else np.zeros(0, dtype=np.int64)
    all_neg = np.concatenate(neg_by) if neg_by else np.zeros(0, dtype=np.int64)
    if all_pos.size == 0:
        raise ValueError("strong pool has no positive regions (IoU >= 0.5); dataset defect")
    if all_neg.size == 0:
        raise ValueError("strong pool has no negative regions (IoU in [0.1, 0.5))")
    strong_regions = np.concatenate([np.arange(*store.region_slice(int(i)).indices(store.num_regions)) for i in strong_images])
    if len(weak_images) == 0:
        raise ValueError("weak pool is empty")
    weak_regions = np.concatenate([np.arange(*store.region_slice(int(i)).indices(store.num_regions)) for i in weak_images])
    if weak_regions.size == 0:
        raise ValueError("weak pool is empty")
    return ObjectnessPools(pos_by, neg_by, all_pos, all_neg, strong_regions, weak_regions)


@dataclass
class ObjectnessBatch:
    balanced: np.ndarray
    balanced_labels: np.ndarray
    random_strong: np.ndarray
    random_weak: np.ndarray

    def check(self, unit, n_pos):
        if not (len(self.balanced) == len(self.random_strong) == len(self.random_weak) == unit):
            raise AssertionError(
                f"batch sizes {len(self.balanced)}/{len(self.random_strong)}/{len(self.random_weak)} != {unit}")
        if int(self.balanced_labels.sum()) != n_pos:
            raise AssertionError(f"balanced sub-batch has {int(self.balanced_labels.sum())} positives, want {n_pos}")

    @property
    def size(self):
        return len(self.balanced) + len(self.random_strong) + len(self.random_weak)


def _take(rng, local, pool, k):
    """``k`` draws from ``local`` without replacement, padded from ``pool`` with replacement."""
    if len(local) >= k:
        return rng.choice(local, size=k, replace=False)
    pad = rng.choice(pool, size=k - len(local), replace=True)
    return np.concatenate([local, pad])


def compose_batch(pools, rng, unit=64, positive_fraction=0.25, images_per_batch=2):
    n_pos = int(round(unit * positive_fraction))
    n_neg = unit - n_pos
    img = rng.choice(len(pools.pos_by_image), size=min(images_per_batch, len(pools.pos_by_image)), replace=False)
    local_pos = np.concatenate([pools.pos_by_image[i] for i in img])
    local_neg = np.concatenate([pools.neg_by_image[i] for i in img])
    pos = _take(rng, local_pos, pools.all_pos, n_pos)
    neg = _take(rng, local_neg, pools.all_neg, n_neg)
    balanced = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    rs = rng.choice(pools.strong_regions, size=unit, replace=len(pools.strong_regions) < unit)
    rw = rng.choice(pools.weak_regions, size=unit, replace=len(pools.weak_regions) < unit)
    batch = ObjectnessBatch(balanced, labels, rs.astype(np.int64), rw.astype(np.int64))
    batch.check(unit, n_pos)
    return batch


def _maybe_flip(store, x, rng, enabled):
    flips = rng.random(x.shape[0]) < 0.5
    if enabled and store.standardizer is not None and flips.any():
        x = x.copy()
        x[flips] = store.standardizer.flip(x[flips])
    return x


# ---------------------------------------------------------------- training


def objectness_losses(model, x_bal, y_bal, x_dom, y_dom, lam):
    """Return (objectness loss, domain loss or None) recorded on the active tape."""
    l_obj = dc.binary_logistic_loss(model.objectness_logits(model.embed(x_bal)), y_bal)
    if not model.cfg.domain_adaptation:
        return l_obj, None
    f = model.embed(x_dom)
    l_dom = dc.binary_logistic_loss(model.domain_logits(dc.grad_reverse(f, lam)), y_dom)
    return l_obj, l_dom


def train_objectness(store, cfg=None, seed=0, strong_images=None, weak_images=None, on_step=None):
    """Train Step 1; returns ``(model, history)``.

    ``history`` holds per-iteration objectness loss, domain loss, lambda and
    batch size. Divergence raises :class:`msdet.diffcore.TrainingDiverged`.
    """
    cfg = cfg or ObjectnessConfig()
    if strong_images is None:
        strong_images = store.images("strong")
    if weak_images is None:
        weak_images = store.images("weak")
    pools = build_pools(store, strong_images, weak_images)
    model = ObjectnessModel.init(store.num_features, cfg, seed)
    sgd = dc.SgdConfig(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([seed, _STREAM_BATCHES])
    feats = store.features
    sched = cfg.schedule
    n_pos = int(round(cfg.batch_unit * cfg.positive_fraction))
    y_dom = np.concatenate([np.ones(cfg.batch_unit), np.zeros(cfg.batch_unit)])
    drop_at = int(cfg.maxiter * cfg.lr_drop_fraction)
    history = {"obj_loss": [], "dom_loss": [], "lambda": [], "batch_size": [], "penalty": []}
    for it in range(cfg.maxiter):
        batch = compose_batch(pools, rng, cfg.batch_unit, cfg.positive_fraction, cfg.images_per_batch)
        batch.check(cfg.batch_unit, n_pos)
        x_bal = _maybe_flip(store, feats[batch.balanced], rng, cfg.flip)
        x_dom = _maybe_flip(store, feats[np.concatenate([batch.random_strong, batch.random_weak])], rng, cfg.flip)
        lam = grl_lambda(it, sched)
        model.params.zero_grad()
        with dc.Tape() as tape:
            l_obj, l_dom = objectness_losses(model, x_bal, batch.balanced_labels, x_dom, y_dom, lam)
            total = l_obj if l_dom is None else dc.add(l_obj, l_dom)
        dc.backward(tape, total)
        value = total.item()
        if not np.isfinite(value):
            raise dc.TrainingDiverged(f"objectness training diverged at iteration {it}")
        lr = cfg.learning_rate if it < drop_at else cfg.lr_after_drop
        dc.sgd_step(model.params, None, sgd, lr=lr)
        history["obj_loss"].append(l_obj.item())
        history["dom_loss"].append(l_dom.item() if l_dom is not None else float("nan"))
        history["lambda"].append(lam)
        history["batch_size"].append(batch.size)
        history["penalty"].append(0.5 * cfg.weight_decay * model.params.sq_norm())
        if on_step is not None:
            on_step(it, model, batch)
    return model, history


# ---------------------------------------------------------------- diagnostics


def _balanced_pair(rng, a, b):
    n = min(len(a), len(b))
    if n == 0:
        raise ValueError("both held-out sets must be nonempty")
    a = a[np.sort(rng.choice(len(a), n, replace=False))] if len(a) > n else a
    b = b[np.sort(rng.choice(len(b), n, replace=False))] if len(b) > n else b
    return a, b


def domain_accuracy(model, heldout_strong, heldout_weak, seed=0):
    """Accuracy of the domain head (threshold 0.5) on a balanced held-out union."""
    s, w = _balanced_pair(np.random.default_rng([seed, _STREAM_PROBE]), np.asarray(heldout_strong), np.asarray(heldout_weak))
    ps = domain_probability(model, s)
    pw = domain_probability(model, w)
    return float((np.sum(ps >= 0.5) + np.sum(pw < 0.5)) / (len(s) + len(w)))


def probe_domain_accuracy(model, train_strong, train_weak, heldout_strong, heldout_weak, seed=0, iters=1500,
                          lr=0.01, batch=128):
    """Train a fresh domain head on the frozen trunk; return its held-out accuracy."""
    rng = np.random.default_rng([seed, _STREAM_PROBE, 1])
    probe = dc.ParamStore()
    add_domain_head(probe, "probe", model.cfg.embed_dim, model.cfg.domain_hidden, rng)
    n_hidden = len(model.cfg.domain_hidden)
    fs = model.embed(np.asarray(train_strong)).data
    fw = model.embed(np.asarray(train_weak)).data
    sgd = dc.SgdConfig(lr, 0.9, 0.0)
    half = batch // 2
    y = np.concatenate([np.ones(half), np.zeros(half)])
    for _ in range(iters):
        xb = np.vstack([fs[rng.integers(0, len(fs), half)], fw[rng.integers(0, len(fw), half)]])
        probe.zero_grad()
        with dc.Tape() as tape:
            loss = dc.binary_logistic_loss(domain_head_logits(probe, "probe", xb, n_hidden), y)
        dc.backward(tape, loss)
        dc.sgd_step(probe, None, sgd)
    s, w = _balanced_pair(np.random.default_rng([seed, _STREAM_PROBE]), np.asarray(heldout_strong), np.asarray(heldout_weak))
    ps = dc._sigmoid_np(domain_head_logits(probe, "probe", model.embed(s).data, n_hidden).data[:, 0])
    pw = dc._sigmoid_np(domain_head_logits(probe, "probe", model.embed(w).data, n_hidden).data[:, 0])
    return float((np.sum(ps >= 0.5) + np.sum(pw < 0.5)) / (len(s) + len(w)))


def objectness_accuracy(model, store, images):
    """Balanced accuracy (mean of positive and negative recall) on labeled regions."""
    pos, neg = [], []
    for i in images:
        gt, _ = store.gt_for_training(int(i))
        sl = store.region_slice(int(i))
        labels, _, _ = label_regions(store.boxes[sl], gt)
        p = objectness_score(model, store.features[sl])
        pos.append(p[labels == 1])
        neg.append(p[labels == 0])
    pos = np.concatenate(pos)
    neg = np.concatenate(neg)
    return 0.5 * (float(np.mean(pos >= 0.5)) + float(np.mean(neg < 0.5)))


# ---------------------------------------------------------------- checkpoints


def save_objectness(path, model, seed=0, step=0):
    return dc.save_checkpoint(path, model.params, kind="objectness", variant=model.variant, seed=seed, step=step,
                              num_features=model.num_features, config=model.cfg.to_dict())


def load_objectness(path):
    params, header = dc.load_checkpoint(path)
    if header.get("kind") != "objectness":
        raise ValueError(f"{path}: not an objectness checkpoint (kind={header.get('kind')!r})")
    cfg = ObjectnessConfig.from_dict(header["config"])
    if header["variant"] != cfg.variant:
        raise ValueError(f"{path}: variant {header['variant']!r} disagrees with its config")
    return ObjectnessModel(params, header["num_features"], cfg)
