"""Acceptance checks. Each test prints one ``acceptance N PASS|FAIL`` line;
the lines are repeated in the pytest terminal summary.

The directional checks (6 to 9) share one run of the default ablation suite
(3 seeds), which takes several minutes.
"""
import filecmp
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from msdet import diffcore as dc
from msdet import metrics as mt
from msdet import mildet as md
from msdet import objectness as ob
from msdet import pipeline as pl
from msdet.config import RunConfig
from msdet.geom import BBox, Detection, iou, nms
from tests.conftest import TINY, numeric_grad, record_acceptance, rel_err
from tests.oracles import brute_ap, raster_iou_float, raster_iou_int


def verdict(n, ok, detail):
    record_acceptance(f"acceptance {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1: gradients


def _tape_grads(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    with dc.Tape() as tape:
        loss = loss_fn()
    dc.backward(tape, loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def _fd_err(loss_fn, tensors, scale=None):
    """Max relative error between tape gradients (times ``scale`` per tensor) and central differences."""
    grads = _tape_grads(loss_fn, tensors)
    worst = 0.0
    for k, (t, g) in enumerate(zip(tensors, grads)):
        num = numeric_grad(lambda: loss_fn().item(), t.data)
        if scale is not None:
            num = num * scale[k]
        worst = max(worst, rel_err(g, num))
    return worst


def _gradient_instance(seed):
    rng = np.random.default_rng([seed, 1])
    errs = {}

    # linear and sigmoid on their own
    x = dc.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    W = dc.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = dc.Tensor(rng.normal(size=2), requires_grad=True)
    wo = rng.normal(size=(4, 2))
    errs["linear"] = _fd_err(lambda: dc.weighted_sum(dc.linear(x, W, b), wo), [x, W, b])
    z = dc.Tensor(rng.normal(scale=3.0, size=(5, 2)), requires_grad=True)
    errs["sigmoid"] = _fd_err(lambda: dc.weighted_sum(dc.sigmoid(z), wo[:1].repeat(5, 0)), [z])

    # objectness and domain losses through a small objectness network
    cfg = ob.ObjectnessConfig(embed_dim=3, hidden=4, domain_hidden=(4,))
    model = ob.ObjectnessModel.init(5, cfg, seed=seed)
    for _, t in model.params.items():
        t.data = t.data + rng.normal(scale=0.1, size=t.data.shape)
    x_bal = rng.normal(size=(8, 5))
    y_bal = np.r_[np.ones(2), np.zeros(6)]
    x_dom = rng.normal(size=(6, 5))
    y_dom = np.r_[np.ones(3), np.zeros(3)]
    lam = float(rng.uniform(0.05, 1.0))
    obj_params = [model.params[n] for n in model.params.names() if not n.startswith("dom.")]
    errs["objectness_loss"] = _fd_err(lambda: ob.objectness_losses(model, x_bal, y_bal, x_dom, y_dom, lam)[0],
                                      obj_params)
    # domain loss through the reversal node: the head sees the plain gradient, the trunk -lambda times it
    names = [n for n in model.params.names() if n.startswith(("dom.", "trunk."))]
    scale = [(-lam if n.startswith("trunk.") else 1.0) for n in names]
    errs["grl_domain_loss"] = _fd_err(lambda: ob.objectness_losses(model, x_bal, y_bal, x_dom, y_dom, lam)[1],
                                      [model.params[n] for n in names], scale)

    # exp-sum-log aggregation
    s = dc.Tensor(rng.normal(scale=2.0, size=(6, 3)), requires_grad=True)
    errs["exp_sum_log"] = _fd_err(lambda: dc.weighted_sum(dc.exp_sum_log(s), wo[0, :1].repeat(3)), [s])

    # bag loss over a small detector, both loss forms, with weight decay
    det = md.DetectorModel.init(5, "ours", ["a", "b", "c"], hidden=4, seed=seed)
    for _, t in det.params.items():
        t.data = t.data + rng.normal(scale=0.2, size=t.data.shape)
    feats = rng.normal(size=(10, 5))
    bags = md.image_bags("ours", 10, rng.uniform(size=10), [int(rng.integers(0, 3))], 3, 0.3)
    for sym in (False, True):
        errs[f"bag_loss_symmetric={sym}"] = _fd_err(
            lambda: md.mil_loss(det, feats, bags, "exp_sum_log", sym, lam=0.01), [t for _, t in det.params.items()])
    return errs


def test_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(100):
        for k, v in _gradient_instance(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= 1e-4 and elapsed < 30.0
    detail = f"max rel err {top:.2e} over 100 instances ({', '.join(f'{k} {v:.1e}' for k, v in worst.items())}); " \
             f"{elapsed:.1f}s"
    verdict(1, ok, detail)


# ---------------------------------------------------------------- 2: GRL sign


def _grl_step(model, batch_x, y_dom, lam, prefix, lr=1e-3):
    model.params.zero_grad()
    x_bal = batch_x[:4]
    with dc.Tape() as tape:
        _, l_dom = ob.objectness_losses(model, x_bal, np.r_[1.0, 0, 0, 0], batch_x, y_dom, lam)
    dc.backward(tape, l_dom)
    before = l_dom.item()
    dc.sgd_step(model.params.subset(prefix), None, dc.SgdConfig(lr, 0.0, 0.0))
    after = ob.objectness_losses(model, x_bal, np.r_[1.0, 0, 0, 0], batch_x, y_dom, lam)[1].item()
    return before, after


def test_gradient_reversal_signs(small_ds):
    pools = ob.build_pools(small_ds, small_ds.images("strong"), small_ds.images("weak"))
    cfg = ob.ObjectnessConfig()
    fails = []
    for seed in range(20):
        batch = ob.compose_batch(pools, np.random.default_rng([seed, 99]))
        x = small_ds.features[np.concatenate([batch.random_strong, batch.random_weak])]
        y = np.r_[np.ones(64), np.zeros(64)]
        base = ob.ObjectnessModel.init(small_ds.num_features, cfg, seed=seed)
        m_trunk = ob.ObjectnessModel(base.params.copy(), base.num_features, cfg)
        m_head = ob.ObjectnessModel(base.params.copy(), base.num_features, cfg)
        b1, a1 = _grl_step(m_trunk, x, y, 0.1, "trunk.")
        b2, a2 = _grl_step(m_head, x, y, 0.1, "dom.")
        if not (a1 > b1 and a2 < b2):
            fails.append((seed, b1, a1, b2, a2))
    verdict(2, not fails, f"20 seeds, trunk step raises L_dom and head step lowers it; failures: {fails or 'none'}")


# ---------------------------------------------------------------- 3: aggregation


def test_exp_sum_log_laws():
    rng = np.random.default_rng(3)
    problems = []
    for k in range(500):
        m = int(rng.integers(1, 40))
        scale = float(rng.choice([0.1, 1.0, 10.0, 300.0]))
        s = rng.normal(scale=scale, size=m)
        x = dc.Tensor(s, requires_grad=True)
        with dc.Tape() as tape:
            y = dc.exp_sum_log(x)
        dc.backward(tape, y)
        v, g = y.item(), x.grad
        lo, hi = s.max(), s.max() + math.log(m)
        if not (lo <= v <= hi):
            problems.append(f"bound {k}")
        if np.any(g < 0) or abs(g.sum() - 1.0) > 1e-12:
            problems.append(f"softmax {k}")
        if m == 1 and v != s[0]:
            problems.append(f"identity {k}")
    for val in (-1e300, -3.5, 0.0, 7.25, 1e300):
        if dc.exp_sum_log(np.array([val])).item() != val:
            problems.append(f"identity {val}")
    verdict(3, not problems, f"500 random bags and 5 singletons; violations: {problems or 'none'}")


# ---------------------------------------------------------------- 4: metric oracles


def _micro_instance(rng):
    n_img = int(rng.integers(1, 4))
    gts = {}
    for img in range(n_img):
        k = int(rng.integers(0, 4))
        if k:
            gts[img] = [tuple(int(v) for v in _int_box(rng)) for _ in range(k)]
    if not gts:
        gts[0] = [_int_box(rng)]
    n_det = int(rng.integers(0, 9))
    ids, scores, boxes = [], [], []
    for _ in range(n_det):
        img = int(rng.integers(0, n_img))
        if img in gts and rng.uniform() < 0.7:
            g = gts[img][int(rng.integers(0, len(gts[img])))]
            d = rng.integers(-1, 2, size=4)
            box = (g[0] + d[0], g[1] + d[1], max(g[2] + d[2], g[0] + d[0] + 1), max(g[3] + d[3], g[1] + d[1] + 1))
        else:
            box = _int_box(rng)
        ids.append(img)
        scores.append(float(rng.choice([0.2, 0.5, 0.7, 0.9])))
        boxes.append(tuple(int(v) for v in box))
    return ids, scores, boxes, gts


def _int_box(rng, n=10):
    x1, y1 = (int(v) for v in rng.integers(1, n - 1, size=2))
    return (x1, y1, int(rng.integers(x1 + 1, n + 1)), int(rng.integers(y1 + 1, n + 1)))


def test_metric_oracles():
    rng = np.random.default_rng(4)
    ap_bad = 0
    for _ in range(200):
        ids, scores, boxes, gts = _micro_instance(rng)
        gt_arr = {k: np.array(v, dtype=np.float64) for k, v in gts.items()}
        box_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        for variant in ("eleven_point", "all_point"):
            got = mt.average_precision(ids, scores, box_arr, gt_arr, 0.5, variant).ap
            if got != float(brute_ap(ids, scores, boxes, gts, variant)):
                ap_bad += 1
    iou_int_bad = 0
    for _ in range(300):
        a, b = _int_box(rng, 24), _int_box(rng, 24)
        if iou(BBox(*a), BBox(*b)) != float(raster_iou_int(a, b)):
            iou_int_bad += 1
    iou_float_err = 0.0
    for _ in range(60):
        x1, y1 = rng.uniform(0, 18, size=2)
        a = (x1, y1, rng.uniform(x1 + 0.05, 19), rng.uniform(y1 + 0.05, 19))
        x1, y1 = rng.uniform(0, 18, size=2)
        b = (x1, y1, rng.uniform(x1 + 0.05, 19), rng.uniform(y1 + 0.05, 19))
        iou_float_err = max(iou_float_err, abs(iou(BBox(*a), BBox(*b)) - raster_iou_float(a, b)))
    nms_bad = 0
    for _ in range(200):
        dets = []
        for _ in range(int(rng.integers(0, 30))):
            x, y = rng.uniform(0, 30, size=2)
            w, h = rng.uniform(1, 15, size=2)
            dets.append(Detection(BBox(x, y, x + w, y + h), float(rng.choice([0.3, rng.uniform()])),
                                  int(rng.integers(1, 3))))
        thr = float(rng.uniform(0.1, 0.9))
        once = nms(dets, thr)
        nms_bad += nms(once, thr) != once
    ok = ap_bad == 0 and iou_int_bad == 0 and iou_float_err <= 1e-3 and nms_bad == 0
    verdict(4, ok, f"AP mismatches {ap_bad}/400, integer IoU mismatches {iou_int_bad}/300, "
                   f"float IoU max err {iou_float_err:.1e}, NMS non-idempotent {nms_bad}/200")


# ---------------------------------------------------------------- 5: batch recipe


def test_objectness_batch_recipe(small_ds):
    cfg = ob.ObjectnessConfig(maxiter=2000)
    seen = {"iters": 0, "bad": 0}

    def check(it, model, batch):
        seen["iters"] += 1
        n_pos = int(batch.balanced_labels.sum())
        if batch.size != 192 or n_pos != 16 or len(batch.balanced) - n_pos != 48:
            seen["bad"] += 1

    try:
        _, hist = ob.train_objectness(small_ds, cfg, seed=0, on_step=check)
        fired = None
    except AssertionError as exc:
        fired = str(exc)
        hist = {"batch_size": []}
    ok = fired is None and seen["iters"] == 2000 and seen["bad"] == 0 and set(hist["batch_size"]) == {192}
    verdict(5, ok, f"{seen['iters']} iterations, {seen['bad']} off-recipe batches, assertion fired: {fired or 'no'}")


# ---------------------------------------------------------------- 6-9: default benchmark


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    t0 = time.perf_counter()
    res = pl.run_ablation_suite(RunConfig(), out, threads=1)
    return res, time.perf_counter() - t0


def _by_name(res):
    return {r["name"]: r for r in res["runs"]}


def _mean(res, prefix, metric, seeds):
    rows = _by_name(res)
    return float(np.mean([rows[f"{prefix}_s{s}"][metric] for s in seeds]))


@pytest.mark.slow
def test_directional_benchmark(benchmark):
    res, elapsed = benchmark
    seeds = res["config"]["ablation"]["seeds"]
    failed = [r["name"] for r in res["runs"] if r["status"] != "ok"]
    cl = {m: 100 * _mean(res, m, "CorLoc", seeds) for m in ("ours", "bwsd", "nodistractor", "oom", "bmsd")}
    ap = {m: 100 * _mean(res, m, "mAP_11pt", seeds) for m in ("ours", "bwsd", "oom")}
    gain_ours = cl["ours"] - cl["bwsd"]
    gain_nd = cl["nodistractor"] - cl["bwsd"]
    checks = {
        "corloc_gain>=10": gain_ours >= 10.0,
        "mAP ours>oom>bwsd": ap["ours"] > ap["oom"] > ap["bwsd"],
        "nodistractor gain<=half": gain_nd <= 0.5 * gain_ours,
        "runtime<=600s": elapsed <= 600.0,
        "all runs ok": not failed,
    }
    detail = (f"CorLoc ours {cl['ours']:.2f} bwsd {cl['bwsd']:.2f} nodistractor {cl['nodistractor']:.2f}; "
              f"mAP ours {ap['ours']:.2f} oom {ap['oom']:.2f} bwsd {ap['bwsd']:.2f}; {elapsed:.0f}s; "
              f"failed checks: {[k for k, v in checks.items() if not v] or 'none'}")
    verdict(6, all(checks.values()), detail)


@pytest.mark.slow
def test_domain_invariance(benchmark):
    res, _ = benchmark
    seeds = res["config"]["ablation"]["seeds"]
    diag = res["objectness"]
    da = [diag[f"domain_invariant_s{s}"]["domain_accuracy"] for s in seeds]
    probe = [diag[f"original_s{s}"]["probe_domain_accuracy"] for s in seeds]
    ok = all(0.45 <= a <= 0.65 for a in da) and all(p > 0.75 for p in probe)
    verdict(7, ok, f"domain-invariant head accuracy {[round(a, 4) for a in da]}, "
                   f"original-trunk probe accuracy {[round(p, 4) for p in probe]}")


@pytest.mark.slow
def test_topk_sweep_shape(benchmark):
    res, _ = benchmark
    seeds = res["config"]["ablation"]["seeds"]
    rows = _by_name(res)
    votes, per = 0, []
    for s in seeds:
        c5, c15, c75 = (rows[n]["CorLoc"] for n in (f"ours_m5_s{s}", f"ours_s{s}", f"ours_m75_s{s}"))
        votes += c15 >= c5 and c15 >= c75
        per.append(f"s{s}: 5% {100 * c5:.2f} 15% {100 * c15:.2f} 75% {100 * c75:.2f}")
    verdict(8, votes * 2 > len(seeds), f"{votes}/{len(seeds)} seeds peak at 15% ({'; '.join(per)})")


@pytest.mark.slow
def test_hard_negative_mining_non_regression(benchmark):
    res, _ = benchmark
    seeds = res["config"]["ablation"]["seeds"]
    rows = _by_name(res)
    pairs = [(100 * rows[f"ours_s{s}"]["mAP_11pt"], 100 * rows[f"ours_hnm_s{s}"]["mAP_11pt"]) for s in seeds]
    ok = all(post >= pre - 1.0 for pre, post in pairs)
    verdict(9, ok, "pre/post mAP " + ", ".join(f"{a:.2f}/{b:.2f}" for a, b in pairs))


# ---------------------------------------------------------------- 10: determinism


def _cli(args, cwd):
    env = dict(os.environ, PYTHONHASHSEED="0")
    return subprocess.run([sys.executable, "-m", "msdet.cli", *args], cwd=cwd, env=env, capture_output=True,
                          text=True, check=False)


def _tree_diff(a, b):
    diffs = []
    fa = sorted(p.relative_to(a) for p in Path(a).rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in Path(b).rglob("*") if p.is_file())
    if fa != fb:
        diffs.append("file lists differ")
    for rel in fa:
        if (Path(b) / rel).is_file() and not filecmp.cmp(Path(a) / rel, Path(b) / rel, shallow=False):
            diffs.append(str(rel))
    return fa, diffs


def test_reruns_are_byte_identical(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    problems, nfiles = [], 0
    for cmd in (["run", "--mode", "ours"], ["ablate"]):
        outs = []
        for k in range(2):
            out = tmp_path / f"{cmd[0]}_{k}"
            r = _cli([*cmd, "--config", str(cfg), "--seed", "0", "--out", str(out)], tmp_path)
            if r.returncode != 0:
                problems.append(f"{cmd[0]} exit {r.returncode}: {r.stderr[-300:]}")
            outs.append(out)
        files, diffs = _tree_diff(*outs)
        nfiles += len(files)
        problems += [f"{cmd[0]}:{d}" for d in diffs]
    verdict(10, not problems and nfiles > 0, f"{nfiles} artifacts compared across two runs each of "
                                             f"'run' and 'ablate'; differing: {problems or 'none'}")
