"""Rotary position encoding and visual/textual position-ID policies."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from dattn.tensor import ConfigError, ShapeError

# Shared position ID given to every visual token in debiased mode.
DEBIASED_VISUAL_POSITION = 0


class PositionMode(str, enum.Enum):
    BIASED = "biased"
    DEBIASED = "debiased"


@dataclass(frozen=True)
class PositionAssignment:
    visual_positions: tuple[int, ...]
    textual_positions: tuple[int, ...]
    mode: PositionMode

    @property
    def n_visual(self) -> int:
        return len(self.visual_positions)

    @property
    def n_textual(self) -> int:
        return len(self.textual_positions)

    @property
    def v2v_positions(self) -> tuple[int, ...]:
        # Debiasing only touches the keys seen by textual queries; V2V keeps
        # the sequential layout.
        if self.mode is PositionMode.BIASED:
            return self.visual_positions
        return tuple(range(self.n_visual))


def assign_positions(n_visual: int, n_textual: int, mode: PositionMode | str = PositionMode.BIASED) -> PositionAssignment:
    """Position IDs for ``n_visual`` visual tokens followed by ``n_textual`` textual ones.

    Biased mode numbers the concatenated sequence ``0..N+M-1``. Debiased mode
    pins every visual token to the same ID while textual tokens keep their
    concatenated indices ``N..N+M-1``.
    """
    mode = PositionMode(mode)
    if n_visual < 0:
        raise ConfigError("n_visual must be >= 0")
    if n_textual < 1:
        raise ConfigError("n_textual must be >= 1")
    if mode is PositionMode.BIASED:
        visual = tuple(range(n_visual))
    else:
        visual = (DEBIASED_VISUAL_POSITION,) * n_visual
    textual = tuple(range(n_visual, n_visual + n_textual))
    return PositionAssignment(visual, textual, mode)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"rotary head_dim must be a positive even integer, got {self.head_dim}")
        if self.base <= 0:
            raise ConfigError("rotary base must be positive")

    def inv_freq(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


def rope_apply(x: np.ndarray, positions, params: RopeParams) -> np.ndarray:
    """Rotate each adjacent pair ``(2i, 2i+1)`` of the last axis.

    ``x`` has shape ``[tokens, heads, head_dim]``; pair ``i`` of token ``t``
    is rotated by ``positions[t] * base**(-2i/head_dim)``. Angles are formed
    in float64 and the result keeps ``x``'s dtype.
    """
    if x.ndim != 3:
        raise ShapeError(f"rope_apply expects [tokens, heads, head_dim], got {x.shape}")
    tokens, _, head_dim = x.shape
    if head_dim != params.head_dim:
        raise ConfigError(f"head_dim {head_dim} does not match rotary params ({params.head_dim})")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (tokens,):
        raise ShapeError(f"expected {tokens} positions, got {pos.shape}")
    angles = pos[:, None] * params.inv_freq()[None, :]
    cos = np.cos(angles)[:, None, :].astype(x.dtype)
    sin = np.sin(angles)[:, None, :].astype(x.dtype)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out
