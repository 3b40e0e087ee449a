import csv
import json

import numpy as np
import pytest

from msdet import mildet as md
from msdet import pipeline as pl
from msdet.config import RunConfig
from tests.conftest import TINY


@pytest.fixture(scope="module")
def tiny_cfg():
    return RunConfig.from_dict(TINY)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory, tiny_cfg):
    d = tmp_path_factory.mktemp("data")
    pl.gen_data(tiny_cfg, d)
    return d


def test_run_pipeline_writes_artifacts(tmp_path, tiny_cfg, tiny_data):
    report = pl.run_pipeline(tiny_cfg.replace(name="r1"), tmp_path, data=tiny_data)
    assert 0.0 <= report.mean_ap_11pt <= 1.0 and 0.0 <= report.corloc_overall <= 1.0
    for rel in ("ckpt/objectness_domain_invariant.ckpt", "data/ranks_domain_invariant.npy", "ckpt/r1.ckpt",
                "detections/r1.csv", "reports/r1.txt", "reports/r1.csv", "reports/r1.json"):
        assert (tmp_path / rel).is_file(), rel
    saved = json.loads((tmp_path / "reports" / "r1.json").read_text())
    assert saved["config"]["detector"]["m_percent"] == 0.15


def test_oom_uses_original_objectness(tmp_path, tiny_cfg, tiny_data):
    pl.run_pipeline(tiny_cfg.replace(mode="oom", name="o"), tmp_path, data=tiny_data)
    assert (tmp_path / "ckpt" / "objectness_original.ckpt").is_file()
    assert md.load_detector(tmp_path / "ckpt" / "o.ckpt").has_background


def test_bwsd_skips_objectness(tmp_path, tiny_cfg, tiny_data):
    pl.run_pipeline(tiny_cfg.replace(mode="bwsd", name="b"), tmp_path, data=tiny_data, train_objectness=False)
    assert not list((tmp_path / "ckpt").glob("objectness_*"))


def test_pipeline_reuses_checkpoint(tmp_path, tiny_cfg, tiny_data):
    pl.run_pipeline(tiny_cfg.replace(name="a"), tmp_path / "a", data=tiny_data)
    ckpt = tmp_path / "a" / "ckpt" / "objectness_domain_invariant.ckpt"
    r2 = pl.run_pipeline(tiny_cfg.replace(name="a"), tmp_path / "b", data=tiny_data, objectness_ckpt=ckpt,
                         train_objectness=False)
    assert (tmp_path / "a" / "detections" / "a.csv").read_bytes() == (tmp_path / "b" / "detections" / "a.csv").read_bytes()
    assert r2.name == "a"


def test_missing_prerequisite_names_stage(tmp_path, tiny_cfg):
    with pytest.raises(pl.StageError) as ei:
        pl.run_pipeline(tiny_cfg, tmp_path, train_objectness=False)
    assert ei.value.stage == "train-objectness"


def test_ablation_suite_and_failure_isolation(tmp_path, tiny_cfg, tiny_data, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("mining exploded")

    monkeypatch.setattr(md, "hard_negative_mine", boom)
    res = pl.run_ablation_suite(tiny_cfg, tmp_path, data=tiny_data)
    status = {r["name"]: r["status"] for r in res["runs"]}
    assert status["ours_hnm_s0"].startswith("failed") and "mining exploded" in status["ours_hnm_s0"]
    expected = {"ours_s0", "bwsd_s0", "bmsd_s0", "oom_s0", "nodistractor_s0", "ours_m5_s0", "ours_pseudo_s0"}
    assert expected <= {n for n, s in status.items() if s == "ok"}
    labels = {r["label"] for r in res["runs"]}
    assert "ours-5%" in labels
    assert set(res["objectness"]) == {"domain_invariant_s0", "original_s0"}
    assert res["objectness"]["original_s0"]["domain_accuracy"] is None
    rep = tmp_path / "reports"
    with open(rep / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} >= {"ours", "bwsd", "ours-5%"}
    curves = list(csv.DictReader(open(rep / "recall_curve.csv")))
    assert len(curves) == 2 * len(tiny_cfg.eval.recall_percentages)
    assert "config:" in (rep / "summary.txt").read_text()


def test_summarize_means_over_ok_runs():
    runs = [
        {"name": "a", "label": "ours", "mode": "ours", "seed": 0, "m_percent": 0.15, "mAP_11pt": 0.2, "mAP_all": 0.2,
         "CorLoc": 0.5, "status": "ok"},
        {"name": "b", "label": "ours", "mode": "ours", "seed": 1, "m_percent": 0.15, "mAP_11pt": 0.4, "mAP_all": 0.4,
         "CorLoc": 0.7, "status": "ok"},
        {"name": "c", "label": "ours", "mode": "ours", "seed": 2, "m_percent": 0.15, "mAP_11pt": None,
         "mAP_all": None, "CorLoc": None, "status": "failed: x"},
    ]
    seeds, table = pl.summarize({"runs": runs})
    assert seeds == [0, 1]
    assert table[0]["mAP_11pt"] == pytest.approx(0.3) and table[0]["CorLoc"] == pytest.approx(0.6)


def test_scores_by_image_splits_ranks(tiny_data):
    store = pl.load_store(tiny_data)
    ranks = np.arange(store.num_regions, dtype=np.float64)
    by = pl.scores_by_image(store, ranks)
    assert len(by) == len(store)
    np.testing.assert_array_equal(by[1], ranks[store.region_slice(1)])
