"""Decomposed attention kernels for mixed visual/textual token sequences."""

from dattn.attention import (
    AttentionConfig,
    AttentionOutput,
    AttentionWeights,
    Merge,
    MixedSequence,
    V2VMode,
    alpha_merge,
    causal_self_attention_oracle,
    decomposed_attention,
    init_attention_weights,
    make_sequence,
    merge_cascade,
    merge_sigmoid,
    merge_tanh,
    t2t_self_attention,
    t2v_cross_attention,
    v2v_self_attention,
)
from dattn.posenc import PositionAssignment, PositionMode, RopeParams, assign_positions, rope_apply
from dattn.tensor import ConfigError, NumericError, Rng, ShapeError

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionOutput",
    "AttentionWeights",
    "ConfigError",
    "Merge",
    "MixedSequence",
    "NumericError",
    "PositionAssignment",
    "PositionMode",
    "Rng",
    "RopeParams",
    "ShapeError",
    "V2VMode",
    "alpha_merge",
    "assign_positions",
    "causal_self_attention_oracle",
    "decomposed_attention",
    "init_attention_weights",
    "make_sequence",
    "merge_cascade",
    "merge_sigmoid",
    "merge_tanh",
    "rope_apply",
    "t2t_self_attention",
    "t2v_cross_attention",
    "v2v_self_attention",
]
