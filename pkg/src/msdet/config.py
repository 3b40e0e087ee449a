"""Run configuration: one JSON document with dataset, objectness, detector and
eval sections plus the seeds. Unknown keys are rejected at every level.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from msdet.mildet import MilConfig, canonical_mode
from msdet.objectness import ObjectnessConfig
from msdet.synthdata.store import DataConfig

SECTIONS = ("dataset", "objectness", "detector", "eval", "ablation", "seed", "mode", "name")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    ap_variant: str = "eleven_point"
    recall_iou: float = 0.7
    recall_percentages: tuple = (1, 2, 5, 10, 15, 20, 30, 50, 75, 100)
    part_bins: int = 10

    def __post_init__(self):
        if self.ap_variant not in ("eleven_point", "all_point"):
            raise ValueError(f"ap_variant must be eleven_point or all_point, got {self.ap_variant!r}")
        for name in ("iou_threshold", "recall_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.part_bins < 1:
            raise ValueError("part_bins must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["recall_percentages"] = list(self.recall_percentages)
        return d

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d, "eval")
        d = dict(d)
        if "recall_percentages" in d:
            d["recall_percentages"] = tuple(d["recall_percentages"])
        return cls(**d)


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple = (0, 1, 2)
    modes: tuple = ("ours", "bwsd", "bmsd", "oom", "nodistractor")
    sweep_percents: tuple = (5, 15, 25, 35, 55, 75)
    pseudo_retrain: bool = True
    hard_negative_mining: bool = True

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d, "ablation")
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        for m in d.get("modes", ()):
            if m != "oom":
                canonical_mode(m)
        return cls(**d)


def _reject_unknown(cls, d, section):
    if not isinstance(d, dict):
        raise ValueError(f"config section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    objectness: ObjectnessConfig = field(default_factory=ObjectnessConfig)
    detector: MilConfig = field(default_factory=MilConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    mode: str = "ours"
    seed: int = 0
    name: str = "run"

    def __post_init__(self):
        if self.mode != "oom":
            object.__setattr__(self, "mode", canonical_mode(self.mode))

    def to_dict(self):
        return {
            "name": self.name,
            "seed": self.seed,
            "mode": self.mode,
            "dataset": self.dataset.to_dict(),
            "objectness": self.objectness.to_dict(),
            "detector": self.detector.to_dict(),
            "eval": self.eval.to_dict(),
            "ablation": self.ablation.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        if "dataset" in d:
            kw["dataset"] = DataConfig.from_dict(d["dataset"])
        if "objectness" in d:
            kw["objectness"] = ObjectnessConfig.from_dict(d["objectness"])
        if "detector" in d:
            _reject_unknown(MilConfig, d["detector"], "detector")
            kw["detector"] = MilConfig.from_dict(d["detector"])
        if "eval" in d:
            kw["eval"] = EvalConfig.from_dict(d["eval"])
        if "ablation" in d:
            kw["ablation"] = AblationConfig.from_dict(d["ablation"])
        for k in ("mode", "seed", "name"):
            if k in d:
                kw[k] = d[k]
        if "seed" in kw and (not isinstance(kw["seed"], int) or isinstance(kw["seed"], bool) or kw["seed"] < 0):
            raise ValueError(f"seed must be a non-negative integer, got {kw['seed']!r}")
        return cls(**kw)

    def replace(self, **changes):
        d = self.to_dict()
        for k, v in changes.items():
            if "." in k:
                sec, key = k.split(".", 1)
                d[sec] = dict(d[sec], **{key: v})
            else:
                d[k] = v
        return RunConfig.from_dict(d)


def load_config(path):
    """Parse a JSON run config; missing sections and keys take their defaults."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)
