"""Causal self-attention and its decomposition into V2V, T2V and T2T parts.

A mixed sequence is ``N`` visual tokens followed by ``M`` textual tokens.
Under a causal mask the full attention splits into three blocks:

* V2V: visual queries against visual keys (causal),
* T2V: textual queries against every visual key (no mask needed),
* T2T: textual queries against textual keys (causal).

The textual output is recovered exactly by blending the T2V and T2T head
outputs with ``alpha_v = sigmoid(S_V - S_T)``, where ``S_V`` and ``S_T`` are
the log-sum-exp of a query's scaled logits over the visual and textual keys.
Blending happens per head, before the output projection.

Weights act on row vectors: ``y = x @ w``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from dattn.posenc import PositionAssignment, PositionMode, RopeParams, assign_positions, rope_apply
from dattn.tensor import (
    ConfigError,
    NumericError,
    Rng,
    ShapeError,
    logsumexp_lastdim,
    resolve_dtype,
    sigmoid,
    softmax_lastdim,
)


class V2VMode(str, enum.Enum):
    FULL = "full"
    DIAGONAL = "diag"


class Merge(str, enum.Enum):
    ALPHA = "alpha"
    CASCADE = "cascade"
    TANH = "tanh"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    rope_base: float = 10000.0
    position_mode: PositionMode = PositionMode.BIASED
    v2v_mode: V2VMode = V2VMode.FULL
    merge: Merge = Merge.ALPHA
    precision: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "position_mode", PositionMode(self.position_mode))
        object.__setattr__(self, "v2v_mode", V2VMode(self.v2v_mode))
        object.__setattr__(self, "merge", Merge(self.merge))
        resolve_dtype(self.precision)
        if self.d_model < 1 or self.n_heads < 1:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError(f"head_dim {self.d_model // self.n_heads} must be even for rotary encoding")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base)

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)

    @property
    def is_exact(self) -> bool:
        """True for the configuration that must reproduce the oracle."""
        return (
            self.position_mode is PositionMode.BIASED
            and self.v2v_mode is V2VMode.FULL
            and self.merge is Merge.ALPHA
        )

    def with_(self, **changes) -> "AttentionConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    # Second projection set for the cascaded cross-attention block.
    extra: "AttentionWeights | None" = None
    gate_g: float = 0.0
    gate_s: float = 0.0

    def __post_init__(self):
        shapes = {m.shape for m in (self.w_q, self.w_k, self.w_v, self.w_o)}
        if len(shapes) != 1:
            raise ShapeError(f"projection matrices differ in shape: {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ShapeError(f"projection matrices must be square, got {shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    def param_count(self, merge: Merge | str) -> int:
        """Trainable parameters the attention block needs under ``merge``."""
        merge = Merge(merge)
        base = 4 * self.d_model**2
        if merge is Merge.CASCADE:
            return 2 * base
        if merge in (Merge.TANH, Merge.SIGMOID):
            return base + 1
        return base


def init_attention_weights(rng: Rng, cfg: AttentionConfig, with_extra: bool | None = None) -> AttentionWeights:
    """Random projections; the cascade block is drawn when ``cfg.merge`` needs it."""
    d, dt = cfg.d_model, cfg.dtype
    mats = [rng.weight(d, d, dt) for _ in range(4)]
    if with_extra is None:
        with_extra = cfg.merge is Merge.CASCADE
    extra = AttentionWeights(*[rng.weight(d, d, dt) for _ in range(4)]) if with_extra else None
    return AttentionWeights(*mats, extra=extra)


@dataclass(frozen=True)
class MixedSequence:
    visual: np.ndarray
    textual: np.ndarray
    positions: PositionAssignment

    def __post_init__(self):
        if self.visual.ndim != 2 or self.textual.ndim != 2:
            raise ShapeError("visual and textual tokens must be 2-D [tokens, d_model]")
        if self.visual.shape[1] != self.textual.shape[1]:
            raise ShapeError(f"width mismatch: visual {self.visual.shape}, textual {self.textual.shape}")
        if self.textual.shape[0] < 1:
            raise ShapeError("at least one textual token is required")
        if self.positions.n_visual != self.visual.shape[0] or self.positions.n_textual != self.textual.shape[0]:
            raise ShapeError("position lists do not match token counts")

    @property
    def n_visual(self) -> int:
        return self.visual.shape[0]

    @property
    def n_textual(self) -> int:
        return self.textual.shape[0]

    def with_mode(self, mode: PositionMode | str) -> "MixedSequence":
        return replace(self, positions=assign_positions(self.n_visual, self.n_textual, mode))

    def with_tokens(self, visual: np.ndarray, textual: np.ndarray) -> "MixedSequence":
        return MixedSequence(visual, textual, self.positions)


def make_sequence(rng: Rng, n_visual: int, n_textual: int, cfg: AttentionConfig) -> MixedSequence:
    visual = rng.normal((n_visual, cfg.d_model), cfg.dtype)
    textual = rng.normal((n_textual, cfg.d_model), cfg.dtype)
    return MixedSequence(visual, textual, assign_positions(n_visual, n_textual, cfg.position_mode))


@dataclass
class AttentionOutput:
    visual_out: np.ndarray
    textual_out: np.ndarray
    alpha_v: np.ndarray | None = None
    s_v: np.ndarray | None = None
    s_t: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def alpha_t(self) -> np.ndarray | None:
        if self.s_v is None or self.s_t is None:
            return None
        return sigmoid(self.s_t - self.s_v)


# -- shared pieces -----------------------------------------------------------


def _project_heads(x: np.ndarray, w: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    return (x @ w).reshape(x.shape[0], cfg.n_heads, cfg.head_dim)


def _merge_heads(h: np.ndarray) -> np.ndarray:
    return h.reshape(h.shape[0], -1)


def _scaled_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``[nq, H, hd] x [nk, H, hd] -> [H, nq, nk]`` scaled by ``1/sqrt(hd)``."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    return (q.transpose(1, 0, 2) @ k.transpose(1, 2, 0)) * q.dtype.type(scale)


def _causal_mask(nq: int, nk: int, offset: int = 0) -> np.ndarray:
    """Boolean ``[nq, nk]``, True where query ``i`` may see key ``j`` (``j <= i + offset``)."""
    return np.arange(nk)[None, :] <= (np.arange(nq)[:, None] + offset)


def _attend(logits: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Softmax over keys then weighted sum: ``[H, nq, nk], [nk, H, hd] -> [nq, H, hd]``."""
    probs = softmax_lastdim(logits)
    return (probs @ v.transpose(1, 0, 2)).transpose(1, 0, 2)


def _positions(positions, n: int) -> tuple[int, ...]:
    pos = tuple(positions)
    if len(pos) != n:
        raise ShapeError(f"expected {n} positions, got {len(pos)}")
    return pos


def _check_width(x: np.ndarray, cfg: AttentionConfig) -> None:
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise ShapeError(f"expected [tokens, {cfg.d_model}], got {x.shape}")


# -- oracle ------------------------------------------------------------------


def oracle_attention_matrix(seq: MixedSequence, w: AttentionWeights, cfg: AttentionConfig):
    """Scaled masked logits and probabilities of the undecomposed attention.

    Both arrays have shape ``[n_heads, L, L]`` with ``L = N + M``; masked
    logits are ``-inf`` and masked probabilities exactly 0.
    """
    _check_oracle(seq, cfg)
    x = np.concatenate([seq.visual, seq.textual], axis=0)
    pos = seq.positions.visual_positions + seq.positions.textual_positions
    q = rope_apply(_project_heads(x, w.w_q, cfg), pos, cfg.rope)
    k = rope_apply(_project_heads(x, w.w_k, cfg), pos, cfg.rope)
    L = x.shape[0]
    logits = np.where(_causal_mask(L, L), _scaled_logits(q, k), -np.inf).astype(x.dtype)
    return logits, softmax_lastdim(logits)


def _check_oracle(seq: MixedSequence, cfg: AttentionConfig) -> None:
    if cfg.position_mode is not PositionMode.BIASED or cfg.v2v_mode is not V2VMode.FULL:
        raise ConfigError("the self-attention oracle only runs with biased positions and full V2V")
    if seq.positions.mode is not PositionMode.BIASED:
        raise ConfigError("the self-attention oracle needs biased (concatenated) positions")


def causal_self_attention_oracle(seq: MixedSequence, w: AttentionWeights, cfg: AttentionConfig) -> AttentionOutput:
    """Plain multi-head causal attention over the concatenated ``[V, T]`` sequence.

    ``alpha_v`` is read off as the probability mass each textual row puts on
    visual columns; ``s_v``/``s_t`` are the log-sum-exp of that row's logits
    over the visual and textual columns.
    """
    _check_width(seq.visual, cfg)
    _check_width(seq.textual, cfg)
    logits, probs = oracle_attention_matrix(seq, w, cfg)
    x = np.concatenate([seq.visual, seq.textual], axis=0)
    v = _project_heads(x, w.w_v, cfg)
    heads = (probs @ v.transpose(1, 0, 2)).transpose(1, 0, 2)
    out = _merge_heads(heads) @ w.w_o
    n = seq.n_visual
    text_logits = logits[:, n:, :]
    return AttentionOutput(
        visual_out=out[:n],
        textual_out=out[n:],
        alpha_v=probs[:, n:, :n].sum(axis=-1).T,
        s_v=logsumexp_lastdim(text_logits[:, :, :n]).T,
        s_t=logsumexp_lastdim(text_logits[:, :, n:]).T,
    )


# -- decomposed blocks -------------------------------------------------------


def v2v_self_attention(visual: np.ndarray, w: AttentionWeights, positions, cfg: AttentionConfig,
                       mode: V2VMode | str | None = None) -> np.ndarray:
    """Visual-only attention, already projected by ``w_o``.

    Full mode is causal multi-head attention among the visual tokens.
    Diagonal mode lets every token attend only to itself, which reduces the
    block to ``(visual @ w_v) @ w_o``: no query/key projection, no softmax,
    linear in the number of visual tokens.
    """
    mode = V2VMode(mode if mode is not None else cfg.v2v_mode)
    _check_width(visual, cfg)
    n = visual.shape[0]
    if mode is V2VMode.DIAGONAL:
        return (visual @ w.w_v) @ w.w_o
    if n < 1:
        raise ShapeError("full V2V attention needs at least one visual token")
    if isinstance(positions, PositionAssignment):
        positions = positions.v2v_positions
    pos = _positions(positions, n)
    q = rope_apply(_project_heads(visual, w.w_q, cfg), pos, cfg.rope)
    k = rope_apply(_project_heads(visual, w.w_k, cfg), pos, cfg.rope)
    v = _project_heads(visual, w.w_v, cfg)
    logits = np.where(_causal_mask(n, n), _scaled_logits(q, k), -np.inf)
    return _merge_heads(_attend(logits, v)) @ w.w_o


def t2v_logits(textual: np.ndarray, visual: np.ndarray, w: AttentionWeights,
               positions: PositionAssignment, cfg: AttentionConfig) -> np.ndarray:
    """Scaled rotary logits ``[H, M, N]`` of textual queries against visual keys."""
    _check_width(textual, cfg)
    _check_width(visual, cfg)
    q = rope_apply(_project_heads(textual, w.w_q, cfg), _positions(positions.textual_positions, textual.shape[0]), cfg.rope)
    k = rope_apply(_project_heads(visual, w.w_k, cfg), _positions(positions.visual_positions, visual.shape[0]), cfg.rope)
    return _scaled_logits(q, k)


def t2v_cross_attention(textual: np.ndarray, visual: np.ndarray, w: AttentionWeights,
                        positions: PositionAssignment, cfg: AttentionConfig):
    """Textual queries over all visual keys; returns ``(xa [M,H,hd], s_v [M,H])``.

    Output is per head and not yet projected by ``w_o``. With no visual
    tokens ``xa`` is zero and ``s_v`` is ``-inf``.
    """
    m = textual.shape[0]
    if visual.shape[0] == 0:
        _check_width(textual, cfg)
        xa = np.zeros((m, cfg.n_heads, cfg.head_dim), dtype=textual.dtype)
        return xa, np.full((m, cfg.n_heads), -np.inf, dtype=textual.dtype)
    logits = t2v_logits(textual, visual, w, positions, cfg)
    v = _project_heads(visual, w.w_v, cfg)
    return _attend(logits, v), logsumexp_lastdim(logits).T


def t2t_self_attention(textual: np.ndarray, w: AttentionWeights, positions: PositionAssignment,
                       cfg: AttentionConfig):
    """Causal attention among textual tokens; returns ``(sa [M,H,hd], s_t [M,H])``."""
    _check_width(textual, cfg)
    m = textual.shape[0]
    if m < 1:
        raise ShapeError("T2T attention needs at least one textual token")
    pos = _positions(positions.textual_positions, m)
    q = rope_apply(_project_heads(textual, w.w_q, cfg), pos, cfg.rope)
    k = rope_apply(_project_heads(textual, w.w_k, cfg), pos, cfg.rope)
    v = _project_heads(textual, w.w_v, cfg)
    logits = np.where(_causal_mask(m, m), _scaled_logits(q, k), -np.inf).astype(textual.dtype)
    return _attend(logits, v), logsumexp_lastdim(logits).T


# -- merges ------------------------------------------------------------------


def _check_pair(xa: np.ndarray, sa: np.ndarray) -> None:
    if xa.shape != sa.shape or xa.ndim != 3:
        raise ShapeError(f"cross/self head outputs differ: {xa.shape} vs {sa.shape}")


def alpha_merge(xa_out: np.ndarray, sa_out: np.ndarray, s_v: np.ndarray, s_t: np.ndarray, w_o: np.ndarray):
    """Blend per head with ``alpha_v = sigmoid(s_v - s_t)``, then project.

    Returns ``(textual_out [M, d_model], alpha_v [M, H])``.
    """
    _check_pair(xa_out, sa_out)
    if s_v.shape != xa_out.shape[:2] or s_t.shape != xa_out.shape[:2]:
        raise ShapeError("log-sum-exp terms must be [M, n_heads]")
    if not np.isfinite(s_t).all():
        raise NumericError("S_T must be finite")
    alpha_v = sigmoid(s_v - s_t)
    alpha_t = sigmoid(s_t - s_v)
    merged = alpha_v[..., None] * xa_out + alpha_t[..., None] * sa_out
    return _merge_heads(merged) @ w_o, alpha_v


def merge_tanh(xa_out: np.ndarray, sa_out: np.ndarray, gate_g: float, w_o: np.ndarray) -> np.ndarray:
    """``w_o(tanh(g) * xa + sa)``."""
    _check_pair(xa_out, sa_out)
    merged = xa_out.dtype.type(np.tanh(gate_g)) * xa_out + sa_out
    return _merge_heads(merged) @ w_o


def merge_sigmoid(xa_out: np.ndarray, sa_out: np.ndarray, gate_s, w_o: np.ndarray) -> np.ndarray:
    """``w_o(sigmoid(s) * xa + (1 - sigmoid(s)) * sa)``.

    ``gate_s`` is normally one learned scalar, but any array broadcastable to
    ``[M, n_heads]`` is accepted.
    """
    _check_pair(xa_out, sa_out)
    s = np.broadcast_to(np.asarray(gate_s, dtype=xa_out.dtype), xa_out.shape[:2])
    g = sigmoid(s)[..., None]
    merged = g * xa_out + sigmoid(-s)[..., None] * sa_out
    return _merge_heads(merged) @ w_o


def _cascade_parts(textual, visual, sa_out, w, positions, cfg):
    if w.extra is None:
        raise ConfigError("cascade merge needs a second weight set (AttentionWeights.extra)")
    sa_proj = _merge_heads(sa_out) @ w.w_o
    hidden = textual + sa_proj
    xa, _ = t2v_cross_attention(hidden, visual, w.extra, positions, cfg)
    return sa_proj, _merge_heads(xa) @ w.extra.w_o


def merge_cascade(textual: np.ndarray, visual: np.ndarray, sa_out: np.ndarray, w: AttentionWeights,
                  positions: PositionAssignment, cfg: AttentionConfig) -> np.ndarray:
    """Self-attention block, then a separate cross-attention block, each residual.

    ``h = t + w_o(SA(t))``; result is ``h + extra.w_o(XA(h, V))`` with the
    cross block using ``w.extra`` for all of its projections.
    """
    sa_proj, xa_proj = _cascade_parts(textual, visual, sa_out, w, positions, cfg)
    return (textual + sa_proj) + xa_proj


# -- assembly ----------------------------------------------------------------


def _resolve_positions(seq: MixedSequence, cfg: AttentionConfig) -> PositionAssignment:
    if seq.positions.mode is not cfg.position_mode:
        raise ConfigError(
            f"sequence positions are {seq.positions.mode.value} but config asks for {cfg.position_mode.value}; "
            "use MixedSequence.with_mode"
        )
    return seq.positions


def decomposed_attention(seq: MixedSequence, w: AttentionWeights, cfg: AttentionConfig) -> AttentionOutput:
    """V2V for visual rows, T2V + T2T merged per ``cfg.merge`` for textual rows.

    Under the cascade merge ``textual_out`` is the residual increment
    ``w_o(SA(t)) + extra.w_o(XA(h, V))`` so that callers add the input back
    exactly once, as with every other merge.
    """
    positions = _resolve_positions(seq, cfg)
    visual, textual = seq.visual, seq.textual
    _check_width(visual, cfg)
    _check_width(textual, cfg)

    if seq.n_visual:
        visual_out = v2v_self_attention(visual, w, positions, cfg)
    else:
        visual_out = np.zeros((0, cfg.d_model), dtype=visual.dtype)

    sa, s_t = t2t_self_attention(textual, w, positions, cfg)
    if cfg.merge is Merge.CASCADE:
        sa_proj, xa_proj = _cascade_parts(textual, visual, sa, w, positions, cfg)
        return AttentionOutput(visual_out, sa_proj + xa_proj, s_t=s_t)

    xa, s_v = t2v_cross_attention(textual, visual, w, positions, cfg)
    out = AttentionOutput(visual_out, None, s_v=s_v, s_t=s_t)
    if cfg.merge is Merge.ALPHA:
        out.textual_out, out.alpha_v = alpha_merge(xa, sa, s_v, s_t, w.w_o)
    elif cfg.merge is Merge.TANH:
        out.textual_out = merge_tanh(xa, sa, w.gate_g, w.w_o)
    else:
        out.textual_out = merge_sigmoid(xa, sa, w.gate_s, w.w_o)
    return out
