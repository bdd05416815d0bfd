"""Dense tensor kernels shared by every attention path.

Tensors are plain ``numpy.ndarray`` objects of ``float32`` or ``float64``.
The helpers here pin down the few behaviours the attention code relies on:
max-subtracted softmax, a log-sum-exp that returns ``-inf`` for an empty
reduction, a sigmoid that maps ``-inf`` to exactly zero, and a seeded
generator whose stream is identical across runs and platforms.
"""

from __future__ import annotations

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Invalid dimensions or option combination."""


class NumericError(ArithmeticError):
    """A kernel received or produced a non-finite value where none is allowed."""


def resolve_dtype(precision: str | type | np.dtype) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ConfigError(f"unknown precision {precision!r}; expected f32 or f64") from None
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported element type {dtype}")
    return dtype


def precision_name(dtype: np.dtype) -> str:
    return "f32" if np.dtype(dtype) == np.float32 else "f64"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    Entries equal to ``-inf`` (masked logits) get probability exactly 0 as
    long as each row holds at least one finite value.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NumericError("softmax input contains NaN or +inf")
    m = np.max(x, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise NumericError("softmax row is entirely masked")
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def logsumexp_lastdim(x: np.ndarray) -> np.ndarray:
    """``log(sum(exp(x)))`` over the last axis.

    An empty last axis, or a row that is entirely ``-inf``, reduces to
    ``-inf`` of the input's element type.
    """
    out_shape = x.shape[:-1]
    if x.shape[-1] == 0:
        return np.full(out_shape, -np.inf, dtype=x.dtype)
    m = np.max(x, axis=-1)
    safe_m = np.where(np.isneginf(m), 0, m)
    with np.errstate(divide="ignore"):
        out = safe_m + np.log(np.sum(np.exp(x - safe_m[..., None]), axis=-1))
    return out.astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow; ``sigmoid(-inf) == 0``."""
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericError("sigmoid of NaN")
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Rng:
    """Seeded sample stream (PCG64). Samples are drawn in float64 and cast."""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape: tuple[int, ...], dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype)

    def uniform(self, shape: tuple[int, ...], low: float = -1.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def weight(self, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
        """Centered uniform init with half-width ``1/sqrt(fan_in)``."""
        bound = 1.0 / np.sqrt(fan_in)
        return self.uniform((fan_in, fan_out), -bound, bound, dtype=dtype)
