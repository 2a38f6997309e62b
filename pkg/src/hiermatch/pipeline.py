"""End-to-end helpers composing features, matching and flow."""

from __future__ import annotations

from typing import Sequence

from .core import Image
from .errors import DimensionMismatchError
from .features import EmbeddingHead, LevelConfig, extract_hierarchy
from .flow import FlowConfig, FlowField, flow_from_matches
from .match import MatchConfig, dense_match


def estimate_flow(
    ref: Image,
    tgt: Image,
    cfgs: Sequence[LevelConfig],
    heads: Sequence[EmbeddingHead],
    match_cfg: MatchConfig = MatchConfig(),
    flow_cfg: FlowConfig = FlowConfig(),
) -> FlowField:
    """Dense matches both ways, consistency and motion filtering, then interpolation.

    The backward pass always runs at stride 1 so every forward match can be
    checked.
    """
    if (ref.width, ref.height) != (tgt.width, tgt.height):
        raise DimensionMismatchError(
            f"reference is {ref.width}x{ref.height}, target is {tgt.width}x{tgt.height}"
        )
    size = (ref.width, ref.height)
    h_ref = extract_hierarchy(ref, cfgs, heads)
    h_tgt = extract_hierarchy(tgt, cfgs, heads)
    fwd = dense_match(h_ref, h_tgt, match_cfg, size=size)
    bwd = dense_match(h_tgt, h_ref, MatchConfig(match_cfg.refine_radius, 1), size=size)
    return flow_from_matches(fwd, bwd, ref.width, ref.height, flow_cfg)
