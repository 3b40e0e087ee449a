"""End-to-end orchestration: data, objectness, region ranking, detector
training, detection and evaluation, plus the ablation suite and reports.

Output layout under ``out``: ``data/``, ``ckpt/``, ``detections/``, ``reports/``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from msdet import metrics as mt
from msdet import mildet as md
from msdet import objectness as ob
from msdet.config import RunConfig
from msdet.geom import BBox, Detection, score_order, write_detections
from msdet.synthdata import generate_dataset, load_store, save_dataset

log = logging.getLogger("msdet.pipeline")

LAYOUT = ("data", "ckpt", "detections", "reports")
RESULT_FIELDS = ("name", "mode", "seed", "m_percent", "mAP_11pt", "mAP_all", "CorLoc", "status")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name, **info):
    t0 = time.perf_counter()
    log.info(json.dumps({"stage": name, "event": "start", **info}, sort_keys=True))
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        log.error(json.dumps({"stage": name, "event": "error", "error": str(exc)}, sort_keys=True))
        raise StageError(name, exc) from exc
    log.info(json.dumps({"stage": name, "event": "done", "seconds": round(time.perf_counter() - t0, 3), **info},
                        sort_keys=True))


def make_layout(out):
    out = Path(out)
    for sub in LAYOUT:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- stages


def gen_data(cfg, out_dir, threads=1):
    ds = generate_dataset(cfg.dataset, seed=cfg.seed, threads=threads)
    save_dataset(ds, out_dir)
    return ds


def objectness_split(store, heldout_fraction):
    """Training and held-out image lists for Step 1 (held-out images are the last of each split)."""
    st_tr, st_ho = store.heldout_split("strong", heldout_fraction)
    wk_tr, wk_ho = store.heldout_split("weak", heldout_fraction)
    return st_tr, wk_tr, st_ho, wk_ho


def train_objectness_stage(store, cfg, seed, variant="domain_invariant", heldout_fraction=None):
    """Train Step 1 on the non-held-out strong and weak images."""
    ocfg = cfg.objectness
    want_da = variant == ob.VARIANT_DOMAIN_INVARIANT
    if ocfg.domain_adaptation != want_da:
        ocfg = ob.ObjectnessConfig.from_dict(dict(ocfg.to_dict(), domain_adaptation=want_da))
    frac = cfg.dataset.heldout_fraction if heldout_fraction is None else heldout_fraction
    st_tr, wk_tr, _, _ = objectness_split(store, frac)
    model, history = ob.train_objectness(store, ocfg, seed=seed, strong_images=st_tr, weak_images=wk_tr)
    return model, history


def rank_regions(store, model):
    """Objectness score of every region, concatenated in store order."""
    if store.num_regions == 0:
        return np.zeros(0)
    return ob.objectness_score(model, store.features)


def scores_by_image(store, ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.shape != (store.num_regions,):
        raise ValueError(f"{ranks.shape[0]} objectness scores for {store.num_regions} regions")
    return {i: ranks[store.region_slice(i)] for i in range(len(store))}


def train_detector_stage(store, cfg, mode, seed, ranks=None):
    mode = md.canonical_mode(mode)
    if mode == "bmsd":
        model, _ = md.train_bmsd(store, cfg.detector, seed)
        return model
    scores = scores_by_image(store, ranks) if ranks is not None else None
    model, _ = md.train_detector(mode, store, scores, cfg.detector, seed)
    return model


def detection_table_to_list(det):
    return [Detection(BBox.from_array(b), float(s), int(c), int(i))
            for i, c, s, b in zip(det["image"], det["class_id"], det["score"], det["box"])]


def detect_stage(model, store, cfg, split="test"):
    return md.detect_store(model, store, store.images(split), cfg.detector)


def class_ids(store):
    return {c: k + 1 for k, c in enumerate(store.weak_categories)}


def test_ground_truth(store, split="test"):
    ids = class_ids(store)
    out = {}
    for i in store.images(split):
        b, labels = store.gt_for_evaluation(int(i))
        out[int(i)] = (b, [ids[c] for c in labels if c in ids])
    return out


def corloc_of(model, store, images=None):
    """CorLoc over weak training images and their image-level categories."""
    if images is None:
        images = store.images("weak")
    ids = class_ids(store)
    tops = md.top_regions(model, store, images)
    top, gts = {}, {}
    for i in images:
        b, labels = store.gt_for_evaluation(int(i))
        labels = np.array(labels, dtype=object)
        rb = store.region_boxes(int(i))
        for c in sorted(set(store.image_labels(int(i)))):
            if c not in ids:
                continue
            k = ids[c]
            gts[(int(i), k)] = b[labels == c] if len(labels) else np.zeros((0, 4))
            top[(int(i), k)] = rb[int(tops[int(i)][k - 1])]
    return mt.corloc(top, gts)


def evaluate_stage(store, det, cfg, model=None, name="run", seed=0):
    K = len(store.weak_categories)
    ap11, apall = mt.evaluate_detections(det, test_ground_truth(store), K, cfg.eval.iou_threshold)
    cats = list(store.weak_categories)
    if model is not None:
        cl_all, cl_per = corloc_of(model, store)
    else:
        cl_all, cl_per = float("nan"), {}
    evaluated = [a for a in ap11 if a is not None]
    return mt.EvalReport(
        classes=cats,
        ap_11pt={c: a for c, a in zip(cats, ap11)},
        ap_all={c: a for c, a in zip(cats, apall)},
        corloc={cats[k - 1]: v for k, v in cl_per.items()},
        mean_ap_11pt=mt.mean_ap(ap11) if evaluated else 0.0,
        mean_ap_all=mt.mean_ap(apall) if evaluated else 0.0,
        corloc_overall=cl_all,
        seed=seed,
        config=cfg.to_dict(),
        name=name,
    )


def write_report(report, reports_dir):
    d = Path(reports_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{report.name}.txt").write_text(report.to_text(), encoding="utf-8")
    (d / f"{report.name}.csv").write_text(report.table_csv(), encoding="utf-8")
    (d / f"{report.name}.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
                                           encoding="utf-8")


# ---------------------------------------------------------------- full run


def _store_for(cfg, out, data, threads):
    if data is not None:
        with stage("load-data", path=str(data)):
            return load_store(data)
    with stage("gen-data", seed=cfg.seed):
        return gen_data(cfg, Path(out) / "data", threads)


def run_pipeline(cfg, out, threads=1, data=None, objectness_ckpt=None, train_objectness=True):
    """Algorithm 1 end to end for ``cfg.mode``; returns the :class:`EvalReport`.

    Every intermediate artifact is written under ``out``. ``mode = "oom"``
    runs the objectness-aware detector on top of the original (no reversal)
    objectness variant.
    """
    if not isinstance(cfg, RunConfig):
        raise TypeError("cfg must be a RunConfig")
    out = make_layout(out)
    mode = cfg.mode
    needs_obj = mode in ("ours", "nodistractor", "oom")
    if needs_obj and objectness_ckpt is None and not train_objectness:
        raise StageError("train-objectness",
                         f"mode {mode!r} needs an objectness checkpoint; none given and training disabled")
    store = _store_for(cfg, out, data, threads)
    ranks = None
    if needs_obj:
        variant = ob.VARIANT_ORIGINAL if mode == "oom" else ob.VARIANT_DOMAIN_INVARIANT
        if objectness_ckpt is not None:
            with stage("load-objectness", path=str(objectness_ckpt)):
                obj = ob.load_objectness(objectness_ckpt)
        else:
            with stage("train-objectness", variant=variant):
                obj, _ = train_objectness_stage(store, cfg, cfg.seed, variant)
                ob.save_objectness(out / "ckpt" / f"objectness_{variant}.ckpt", obj, seed=cfg.seed,
                                   step=cfg.objectness.maxiter)
        with stage("rank-regions"):
            ranks = rank_regions(store, obj)
            np.save(out / "data" / f"ranks_{obj.variant}.npy", ranks)
    det_mode = "ours" if mode == "oom" else mode
    with stage("train-detector", mode=mode):
        model = train_detector_stage(store, cfg, det_mode, cfg.seed, ranks)
        md.save_detector(out / "ckpt" / f"{cfg.name}.ckpt", model, seed=cfg.seed, config=cfg.detector)
    with stage("detect"):
        det = detect_stage(model, store, cfg)
        write_detections(out / "detections" / f"{cfg.name}.csv", detection_table_to_list(det))
    with stage("evaluate"):
        report = evaluate_stage(store, det, cfg, model, cfg.name, cfg.seed)
        write_report(report, out / "reports")
    return report


# ---------------------------------------------------------------- ablations


def _result(name, mode, seed, m, report=None, status="ok", label=None):
    return {
        "name": name, "label": label or mode, "mode": mode, "seed": seed, "m_percent": m,
        "mAP_11pt": None if report is None else report.mean_ap_11pt,
        "mAP_all": None if report is None else report.mean_ap_all,
        "CorLoc": None if report is None else report.corloc_overall,
        "status": status,
    }


def objectness_diagnostics(store, model, cfg, seed):
    """Held-out objectness accuracy, domain accuracy and a fresh-probe domain accuracy."""
    st_tr, wk_tr, st_ho, wk_ho = objectness_split(store, cfg.dataset.heldout_fraction)

    def rows(imgs):
        if len(imgs) == 0:
            return np.zeros((0, store.num_features))
        return store.features[np.concatenate([np.arange(store.offsets[i], store.offsets[i + 1]) for i in imgs])]

    out = {"objectness_accuracy": ob.objectness_accuracy(model, store, st_ho)}
    rs, rw = rows(st_ho), rows(wk_ho)
    out["domain_accuracy"] = ob.domain_accuracy(model, rs, rw, seed=seed) if model.cfg.domain_adaptation else None
    out["probe_domain_accuracy"] = ob.probe_domain_accuracy(model, rows(st_tr), rows(wk_tr), rs, rw, seed=seed)
    return out


def ranking_curves(store, ranks, cfg, m_percent):
    """Recall-vs-percentage curve and part histogram of a region ranking on the weak split."""
    ranked, sel, gts = [], [], []
    for i in store.images("weak"):
        sl = store.region_slice(int(i))
        order = score_order(ranks[sl])
        boxes = store.boxes[sl][order]
        g, _ = store.gt_for_evaluation(int(i))
        ranked.append(boxes)
        sel.append(boxes[: int(math.ceil(m_percent * len(order) - 1e-9))])
        gts.append(g)
    pct, rec = mt.recall_curve(ranked, gts, cfg.eval.recall_iou, cfg.eval.recall_percentages)
    edges, masses = mt.part_distribution(sel, gts, cfg.eval.part_bins)
    return {"percentages": pct.tolist(), "recall": rec.tolist(), "part_edges": edges.tolist(),
            "part_masses": masses.tolist()}


def run_ablation_suite(cfg, out, threads=1, data=None):
    """Every configured mode and the top-k% sweep over every configured seed.

    Returns a results dict with per-run rows, per-seed objectness diagnostics
    and ranking curves. A failing run is recorded with its error and the
    suite continues.
    """
    out = make_layout(out)
    ab = cfg.ablation
    rows, diagnostics, curves = [], {}, {}
    for seed in ab.seeds:
        scfg = cfg.replace(seed=int(seed))
        tag = f"s{seed}"
        try:
            if data is not None:
                with stage("load-data", path=str(data)):
                    store = load_store(data)
            else:
                with stage("gen-data", seed=seed):
                    store = gen_data(scfg, out / "data" / tag, threads)
        except StageError as exc:
            rows.append(_result(f"data_{tag}", "data", seed, None, status=f"failed: {exc}"))
            continue
        ranks = {}
        for variant in (ob.VARIANT_DOMAIN_INVARIANT, ob.VARIANT_ORIGINAL):
            needed = (variant == ob.VARIANT_DOMAIN_INVARIANT and any(m in ("ours", "nodistractor")
                                                                       for m in ab.modes)) or \
                     (variant == ob.VARIANT_ORIGINAL and "oom" in ab.modes) or \
                     (variant == ob.VARIANT_DOMAIN_INVARIANT and ab.sweep_percents)
            if not needed:
                continue
            try:
                with stage("train-objectness", variant=variant, seed=seed):
                    obj, _ = train_objectness_stage(store, scfg, seed, variant)
                    ob.save_objectness(out / "ckpt" / f"objectness_{variant}_{tag}.ckpt", obj, seed=seed,
                                       step=scfg.objectness.maxiter)
                with stage("rank-regions", variant=variant, seed=seed):
                    ranks[variant] = rank_regions(store, obj)
                    np.save(out / "data" / f"ranks_{variant}_{tag}.npy", ranks[variant])
                with stage("objectness-diagnostics", variant=variant, seed=seed):
                    diagnostics[f"{variant}_{tag}"] = objectness_diagnostics(store, obj, scfg, seed)
                    curves[f"{variant}_{tag}"] = ranking_curves(store, ranks[variant], scfg,
                                                                scfg.detector.m_percent)
            except StageError as exc:
                rows.append(_result(f"objectness_{variant}_{tag}", "objectness", seed, None,
                                    status=f"failed: {exc}"))

        jobs = []
        for mode in ab.modes:
            jobs.append((f"{mode}_{tag}", mode, scfg.detector.m_percent, mode))
        for p in ab.sweep_percents:
            m = p / 100.0
            if "ours" in ab.modes and abs(m - scfg.detector.m_percent) < 1e-12:
                continue
            jobs.append((f"ours_m{p:g}_{tag}", "ours", m, f"ours-{p:g}%"))
        ours_model = None
        for name, mode, m, label in jobs:
            try:
                rcfg = scfg.replace(**{"detector.m_percent": m, "name": name, "mode": mode})
                variant = ob.VARIANT_ORIGINAL if mode == "oom" else ob.VARIANT_DOMAIN_INVARIANT
                r = ranks.get(variant) if mode in ("ours", "nodistractor", "oom") else None
                if mode in ("ours", "nodistractor", "oom") and r is None:
                    raise StageError("train-detector", f"no objectness ranking for {name}")
                with stage("train-detector", run=name):
                    model = train_detector_stage(store, rcfg, "ours" if mode == "oom" else mode, seed, r)
                    md.save_detector(out / "ckpt" / f"{name}.ckpt", model, seed=seed, config=rcfg.detector)
                report = _detect_and_evaluate(model, store, rcfg, out, name, seed)
                rows.append(_result(name, mode, seed, m, report, label=label))
                if name == f"ours_{tag}":
                    ours_model = model
            except StageError as exc:
                rows.append(_result(name, mode, seed, m, status=f"failed: {exc}", label=label))
        if ours_model is not None:
            if ab.pseudo_retrain:
                name = f"ours_pseudo_{tag}"
                try:
                    with stage("pseudo-retrain", run=name):
                        pgt = md.pseudo_gt_select(ours_model, store)
                        model = md.retrain_supervised(pgt, store, scfg.detector, seed)
                        md.save_detector(out / "ckpt" / f"{name}.ckpt", model, seed=seed, config=scfg.detector)
                    report = _detect_and_evaluate(model, store, scfg.replace(name=name), out, name, seed)
                    rows.append(_result(name, "ours+pseudo", seed, scfg.detector.m_percent, report))
                except StageError as exc:
                    rows.append(_result(name, "ours+pseudo", seed, scfg.detector.m_percent, status=f"failed: {exc}"))
            if ab.hard_negative_mining:
                name = f"ours_hnm_{tag}"
                try:
                    with stage("mine-hard-negatives", run=name):
                        model, _ = md.hard_negative_mine(ours_model, store, scfg.detector, seed)
                        md.save_detector(out / "ckpt" / f"{name}.ckpt", model, seed=seed, config=scfg.detector)
                    report = _detect_and_evaluate(model, store, scfg.replace(name=name), out, name, seed)
                    rows.append(_result(name, "ours+hnm", seed, scfg.detector.m_percent, report))
                except StageError as exc:
                    rows.append(_result(name, "ours+hnm", seed, scfg.detector.m_percent, status=f"failed: {exc}"))
    results = {"config": cfg.to_dict(), "runs": rows, "objectness": diagnostics, "curves": curves}
    emit_report(results, out / "reports")
    return results


def _detect_and_evaluate(model, store, cfg, out, name, seed):
    with stage("detect", run=name):
        det = detect_stage(model, store, cfg)
        write_detections(out / "detections" / f"{name}.csv", detection_table_to_list(det))
    with stage("evaluate", run=name):
        report = evaluate_stage(store, det, cfg, model, name, seed)
        write_report(report, out / "reports")
    return report


# ---------------------------------------------------------------- reports


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return mt.pct(v)


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def summarize(results):
    """Mode x metric table: per-seed values and means over successful runs."""
    runs = [r for r in results.get("runs", []) if r.get("status") == "ok"]
    seeds = sorted({r["seed"] for r in runs})
    groups = {}
    for r in runs:
        groups.setdefault(r.get("label", r["mode"]), {})[r["seed"]] = r
    table = []
    for label, by_seed in groups.items():
        first = by_seed[next(iter(by_seed))]
        row = {"label": label, "mode": first["mode"], "m_percent": first["m_percent"], "seeds": {}}
        for metric in ("mAP_11pt", "mAP_all", "CorLoc"):
            vals = [by_seed[s][metric] for s in seeds if s in by_seed]
            row[metric] = float(np.mean(vals)) if vals else None
            row["seeds"][metric] = {s: by_seed[s][metric] for s in seeds if s in by_seed}
        table.append(row)
    return seeds, table


def emit_report(results, out_dir):
    """Comparison tables, curve files and a plain-text summary under ``out_dir``."""
    d = Path(out_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("report", f"cannot create {d}: {exc}") from exc
    runs = results.get("runs", [])
    (d / "results.json").write_text(json.dumps(results, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (d / "runs.csv").write_text(_csv(
        [[r["name"], r["mode"], r["seed"], "" if r["m_percent"] is None else f"{100 * r['m_percent']:.2f}",
          _fmt(r["mAP_11pt"]), _fmt(r["mAP_all"]), _fmt(r["CorLoc"]), r["status"]] for r in runs],
        RESULT_FIELDS), encoding="utf-8")
    seeds, table = summarize(results)
    header = ["method", "m_percent", "mAP_11pt", "mAP_all", "CorLoc"] + \
             [f"{metric}_s{s}" for metric in ("mAP_11pt", "CorLoc") for s in seeds]
    body = []
    for row in table:
        body.append([row["label"], f"{100 * row['m_percent']:.2f}", _fmt(row["mAP_11pt"]), _fmt(row["mAP_all"]),
                     _fmt(row["CorLoc"])] +
                    [_fmt(row["seeds"][metric].get(s)) for metric in ("mAP_11pt", "CorLoc") for s in seeds])
    (d / "comparison.csv").write_text(_csv(body, header), encoding="utf-8")

    curves = results.get("curves", {})
    rec_rows, part_rows = [], []
    for key in sorted(curves):
        c = curves[key]
        for p, r in zip(c["percentages"], c["recall"]):
            rec_rows.append([key, f"{p:g}", _fmt(r)])
        for j, mass in enumerate(c["part_masses"]):
            part_rows.append([key, f"{100 * c['part_edges'][j]:.2f}", f"{100 * c['part_edges'][j + 1]:.2f}",
                              _fmt(mass)])
    (d / "recall_curve.csv").write_text(_csv(rec_rows, ["ranking", "percent", "recall"]), encoding="utf-8")
    (d / "part_distribution.csv").write_text(_csv(part_rows, ["ranking", "bin_lo", "bin_hi", "fraction"]),
                                             encoding="utf-8")
    diag = results.get("objectness", {})
    (d / "objectness.csv").write_text(_csv(
        [[k, _fmt(v.get("objectness_accuracy")), _fmt(v.get("domain_accuracy")),
          _fmt(v.get("probe_domain_accuracy"))] for k, v in sorted(diag.items())],
        ["model", "objectness_accuracy", "domain_accuracy", "probe_domain_accuracy"]), encoding="utf-8")

    lines = ["Ablation summary", ""]
    lines.append(f"runs: {len(runs)} ({sum(r['status'] == 'ok' for r in runs)} ok)")
    for r in runs:
        lines.append(f"  {r['name']}: mode={r['mode']} seed={r['seed']} mAP={_fmt(r['mAP_11pt'])} "
                     f"CorLoc={_fmt(r['CorLoc'])} status={r['status']}")
    lines += ["", "means over seeds:"]
    for row in table:
        lines.append(f"  {row['label']}: mAP={_fmt(row['mAP_11pt'])} CorLoc={_fmt(row['CorLoc'])}")
    lines += ["", "config:", json.dumps(results.get("config", {}), sort_keys=True, indent=2)]
    (d / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return d
