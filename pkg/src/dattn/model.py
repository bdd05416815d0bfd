"""Toy pre-norm decoder stack used to record alpha_v across layers and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dattn.attention import (
    AttentionConfig,
    AttentionWeights,
    Merge,
    MixedSequence,
    causal_self_attention_oracle,
    decomposed_attention,
    init_attention_weights,
)
from dattn.tensor import Rng, ShapeError

RMS_EPS = 1e-12
MLP_EXPANSION = 4


@dataclass(frozen=True)
class DecoderLayer:
    attn: AttentionWeights
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    @property
    def d_model(self) -> int:
        return self.attn.d_model


def init_layers(rng: Rng, cfg: AttentionConfig, n_layers: int) -> list[DecoderLayer]:
    d, dt = cfg.d_model, cfg.dtype
    layers = []
    for _ in range(n_layers):
        attn = init_attention_weights(rng, cfg)
        w_up = rng.weight(d, MLP_EXPANSION * d, dt)
        w_down = rng.weight(MLP_EXPANSION * d, d, dt)
        ones = np.ones(d, dtype=dt)
        layers.append(DecoderLayer(attn, w_up, w_down, ones, ones.copy()))
    return layers


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + x.dtype.type(RMS_EPS)) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    return 0.5 * x * (1.0 + np.tanh(c * (x + x.dtype.type(0.044715) * x**3)))


def mlp(x: np.ndarray, layer: DecoderLayer) -> np.ndarray:
    return gelu(x @ layer.w_up) @ layer.w_down


@dataclass
class AlphaRecord:
    """alpha_v captured per ``[layer, head, textual token]``."""

    values: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    @property
    def n_heads(self) -> int:
        return self.values.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.values.shape[2]

    def token_mean(self) -> np.ndarray:
        """``[layer, head]`` mean over textual tokens."""
        return self.values.mean(axis=2)

    def sorted_head_order(self) -> np.ndarray:
        """Per layer, head indices ordered by ascending token-mean alpha (stable)."""
        return np.argsort(self.token_mean(), axis=1, kind="stable")

    def sorted_means(self) -> np.ndarray:
        means = self.token_mean()
        return np.take_along_axis(means, self.sorted_head_order(), axis=1)

    def entries(self):
        for layer in range(self.n_layers):
            for head in range(self.n_heads):
                for token in range(self.n_tokens):
                    yield layer, head, token, float(self.values[layer, head, token])


def _attention(seq: MixedSequence, w: AttentionWeights, cfg: AttentionConfig, use_oracle: bool):
    if use_oracle:
        return causal_self_attention_oracle(seq, w, cfg)
    return decomposed_attention(seq, w, cfg)


def layer_forward(seq: MixedSequence, layer: DecoderLayer, cfg: AttentionConfig, use_oracle: bool = False):
    """One residual block; returns ``(new_sequence, attention_output)``.

    ``x + Attn(norm(x))`` followed by ``h + MLP(norm(h))``, applied to the
    visual and textual streams together. ``use_oracle`` swaps the decomposed
    attention for the undecomposed reference.
    """
    if seq.visual.shape[1] != layer.d_model or layer.d_model != cfg.d_model:
        raise ShapeError(f"layer width {layer.d_model} does not match sequence/config width")
    normed = seq.with_tokens(rms_norm(seq.visual, layer.attn_norm), rms_norm(seq.textual, layer.attn_norm))
    attn = _attention(normed, layer.attn, cfg, use_oracle)
    hv = seq.visual + attn.visual_out
    ht = seq.textual + attn.textual_out
    hv = hv + mlp(rms_norm(hv, layer.mlp_norm), layer)
    ht = ht + mlp(rms_norm(ht, layer.mlp_norm), layer)
    return seq.with_tokens(hv, ht), attn


def stack_forward(seq: MixedSequence, layers: list[DecoderLayer], cfg: AttentionConfig,
                  record: bool = False, use_oracle: bool = False):
    """Run every layer in order; returns ``(sequence, AlphaRecord | None)``.

    alpha_v is recorded only when ``record`` is set and the merge is alpha
    weighting (the oracle path reports the equivalent visual softmax mass).
    """
    if not layers:
        raise ValueError("stack_forward needs at least one layer")
    capture = record and (cfg.merge is Merge.ALPHA or use_oracle)
    alphas = []
    for layer in layers:
        seq, attn = layer_forward(seq, layer, cfg, use_oracle)
        if capture:
            alphas.append(attn.alpha_v.T)
    return seq, (AlphaRecord(np.stack(alphas)) if capture else None)
