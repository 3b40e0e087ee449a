"""Synthetic scenes with planted distractors, proposals and region descriptors."""
from msdet.synthdata.features import FEATURE_NAMES, NUM_FEATURES, Standardizer, extract_features
from msdet.synthdata.proposals import ProposalConfig, propose_regions
from msdet.synthdata.render import CategorySpec, Scene, default_categories, render_scene
from msdet.synthdata.store import (
    DataConfig,
    RegionStore,
    SceneDataset,
    WeakBoxAccessError,
    export_features,
    generate_dataset,
    ingest_external_features,
    load_dataset,
    load_store,
    save_dataset,
)

__all__ = [
    "FEATURE_NAMES", "NUM_FEATURES", "Standardizer", "extract_features", "ProposalConfig", "propose_regions",
    "CategorySpec", "Scene", "default_categories", "render_scene", "DataConfig", "RegionStore", "SceneDataset",
    "WeakBoxAccessError", "export_features", "generate_dataset", "ingest_external_features", "load_dataset",
    "load_store", "save_dataset",
]
