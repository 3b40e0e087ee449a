"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure. Stage
logs are JSON lines on standard error.
"""
from __future__ import annotations

import os

# Pin BLAS to one thread before numpy loads; --threads governs our own pools.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from msdet import mildet as md  # noqa: E402
from msdet import objectness as ob  # noqa: E402
from msdet import pipeline as pl  # noqa: E402
from msdet.config import RunConfig, load_config  # noqa: E402
from msdet.geom import read_detections, write_detections  # noqa: E402
from msdet.synthdata import load_store  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_logging(verbose):
    """Stage events go to stderr as JSON lines; ``--verbose`` adds debug output."""
    logger = logging.getLogger("msdet")
    for h in list(logger.handlers):
        if getattr(h, "msdet_cli", False):
            logger.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.msdet_cli = True
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def _resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    return cfg.replace(**changes) if changes else cfg


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_data(args, cfg):
    _require(args, "out")
    ds = pl.gen_data(cfg, args.out, args.threads)
    print(f"wrote {len(ds)} images, {ds.num_regions} regions to {args.out}")


def cmd_train_objectness(args, cfg):
    _require(args, "data", "out")
    store = load_store(args.data)
    variant = args.variant or cfg.objectness.variant
    model, hist = pl.train_objectness_stage(store, cfg, cfg.seed, variant)
    ob.save_objectness(_parent(args.out), model, seed=cfg.seed, step=cfg.objectness.maxiter)
    print(f"objectness ({variant}) final loss {np.mean(hist['obj_loss'][-100:]):.6f} -> {args.out}")


def cmd_rank_regions(args, cfg):
    _require(args, "data", "ckpt", "out")
    store = load_store(args.data)
    ranks = pl.rank_regions(store, ob.load_objectness(args.ckpt))
    np.save(_parent(args.out), ranks)
    print(f"ranked {ranks.shape[0]} regions -> {args.out}")


def _ranks_for(args, store):
    if args.ranks:
        return np.load(args.ranks)
    if args.objectness:
        return pl.rank_regions(store, ob.load_objectness(args.objectness))
    return None


def cmd_train_detector(args, cfg):
    _require(args, "data", "out")
    mode = cfg.mode if cfg.mode != "oom" else "ours"  # oom differs only in the objectness checkpoint given
    store = load_store(args.data)
    ranks = _ranks_for(args, store)
    if mode in ("ours", "nodistractor") and ranks is None:
        raise UsageError(f"mode {mode!r} requires --objectness <ckpt> or --ranks <file>")
    model = pl.train_detector_stage(store, cfg, mode, cfg.seed, ranks)
    md.save_detector(_parent(args.out), model, seed=cfg.seed, config=cfg.detector)
    print(f"detector ({mode}) -> {args.out}")


def cmd_detect(args, cfg):
    _require(args, "data", "ckpt", "out")
    store = load_store(args.data)
    model = md.load_detector(args.ckpt)
    det = pl.detect_stage(model, store, cfg, args.split)
    write_detections(_parent(args.out), pl.detection_table_to_list(det))
    print(f"{det['score'].shape[0]} detections -> {args.out}")


def cmd_evaluate(args, cfg):
    _require(args, "data", "detections", "out")
    store = load_store(args.data)
    dets = read_detections(args.detections)
    det = {
        "image": np.array([d.image_id for d in dets], dtype=np.int64),
        "class_id": np.array([d.class_id for d in dets], dtype=np.int64),
        "score": np.array([d.score for d in dets], dtype=np.float64),
        "box": np.array([d.box.as_array() for d in dets], dtype=np.float64).reshape(-1, 4),
    }
    model = md.load_detector(args.ckpt) if args.ckpt else None
    name = args.name or Path(args.detections).stem
    report = pl.evaluate_stage(store, det, cfg, model, name, cfg.seed)
    pl.write_report(report, args.out)
    sys.stdout.write(report.to_text())


def cmd_pseudo_retrain(args, cfg):
    _require(args, "data", "ckpt", "out")
    store = load_store(args.data)
    pgt = md.pseudo_gt_select(md.load_detector(args.ckpt), store)
    model = md.retrain_supervised(pgt, store, cfg.detector, cfg.seed)
    md.save_detector(_parent(args.out), model, seed=cfg.seed, config=cfg.detector)
    print(f"supervised detector from {len(pgt)} pseudo-labeled images -> {args.out}")


def cmd_mine(args, cfg):
    _require(args, "data", "ckpt", "out")
    store = load_store(args.data)
    model, mined = md.hard_negative_mine(md.load_detector(args.ckpt), store, cfg.detector, cfg.seed)
    md.save_detector(_parent(args.out), model, seed=cfg.seed, config=cfg.detector)
    print(f"mined {sum(len(n) for _, n in mined.values())} hard negatives -> {args.out}")


def cmd_run(args, cfg):
    _require(args, "out")
    report = pl.run_pipeline(cfg, args.out, args.threads, data=args.data, objectness_ckpt=args.ckpt,
                             train_objectness=not args.no_train)
    sys.stdout.write(report.to_text())


def cmd_ablate(args, cfg):
    _require(args, "out")
    results = pl.run_ablation_suite(cfg, args.out, args.threads, data=args.data)
    sys.stdout.write((Path(args.out) / "reports" / "summary.txt").read_text(encoding="utf-8"))
    failed = [r["name"] for r in results["runs"] if r["status"] != "ok"]
    if failed:
        print(f"failed runs: {', '.join(failed)}", file=sys.stderr)


def cmd_report(args, cfg):
    _require(args, "out")
    if args.results:
        results = json.loads(Path(args.results).read_text(encoding="utf-8"))
    else:
        results = {"config": cfg.to_dict(), "runs": [], "objectness": {}, "curves": {}}
    d = pl.emit_report(results, args.out)
    sys.stdout.write((d / "summary.txt").read_text(encoding="utf-8"))


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic benchmark"),
    "train-objectness": (cmd_train_objectness, "Step 1: train the objectness network"),
    "rank-regions": (cmd_rank_regions, "score every region with an objectness checkpoint"),
    "train-detector": (cmd_train_detector, "Step 2: train a MIL detector"),
    "detect": (cmd_detect, "run a detector and write detection records"),
    "evaluate": (cmd_evaluate, "AP/mAP and CorLoc of a detection file"),
    "pseudo-retrain": (cmd_pseudo_retrain, "retrain a supervised detector on pseudo ground truth"),
    "mine-hard-negatives": (cmd_mine, "fine-tune a detector with mined hard negatives"),
    "run": (cmd_run, "full pipeline for one mode"),
    "ablate": (cmd_ablate, "all modes and the top-k%% sweep over the configured seeds"),
    "report": (cmd_report, "emit comparison tables from a results file"),
}


def build_parser():
    p = _Parser(prog="msdet", description="Mixed supervised detection with objectness transfer.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="JSON run config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--data", help="dataset directory or feature-exchange file")
        s.add_argument("--ckpt")
        s.add_argument("--mode")
        s.add_argument("--verbose", action="store_true")
        if name == "train-objectness":
            s.add_argument("--variant", choices=[ob.VARIANT_DOMAIN_INVARIANT, ob.VARIANT_ORIGINAL])
        if name == "train-detector":
            s.add_argument("--objectness", help="objectness checkpoint")
            s.add_argument("--ranks", help="precomputed objectness scores (.npy)")
        if name == "detect":
            s.add_argument("--split", default="test", choices=["strong", "weak", "test"])
        if name == "evaluate":
            s.add_argument("--detections")
            s.add_argument("--name")
        if name == "run":
            s.add_argument("--no-train", action="store_true", help="never train objectness; requires --ckpt")
        if name == "report":
            s.add_argument("--results", help="results.json written by ablate")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        _setup_logging(args.verbose)
        cfg = _resolve_config(args)
    except (UsageError, ValueError, OSError) as exc:
        print(f"msdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    fn = COMMANDS[args.command][0]
    try:
        with pl.stage(args.command):
            fn(args, cfg)
    except UsageError as exc:
        print(f"msdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.StageError as exc:
        if isinstance(exc.cause, UsageError):
            print(f"msdet: error: {exc.cause}", file=sys.stderr)
            return EXIT_USAGE
        cause = exc.cause
        detail = f"{type(cause).__name__}: {cause}" if isinstance(cause, Exception) else str(cause)
        print(f"msdet: stage {exc.stage!r} failed: {detail}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
