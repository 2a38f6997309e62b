"""Hierarchical metric learning and coarse-to-fine matching for dense correspondences."""

__version__ = "0.1.0"

from .core import FeatureMap, Image, bilinear_sample, downsample, l2_normalize, to_grayscale
from .features import (
    EmbeddingHead,
    FeatureHierarchy,
    LevelConfig,
    apply_head,
    compute_base_descriptors,
    default_level_configs,
    extract_hierarchy,
    init_heads,
)
from .flow import FlowConfig, FlowField, interpolate_flow
from .learn import CorrespondenceSet, TrainConfig, train
from .match import MatchConfig, MatchResult, concat_match, dense_match, hierarchical_match
from .match3d import Match3DConfig, match_3d

__all__ = [
    "CorrespondenceSet",
    "EmbeddingHead",
    "FeatureHierarchy",
    "FeatureMap",
    "FlowConfig",
    "FlowField",
    "Image",
    "LevelConfig",
    "Match3DConfig",
    "MatchConfig",
    "MatchResult",
    "TrainConfig",
    "apply_head",
    "bilinear_sample",
    "compute_base_descriptors",
    "concat_match",
    "default_level_configs",
    "dense_match",
    "downsample",
    "extract_hierarchy",
    "hierarchical_match",
    "init_heads",
    "interpolate_flow",
    "l2_normalize",
    "match_3d",
    "to_grayscale",
    "train",
]
