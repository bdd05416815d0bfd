"""Verification sweeps, finite-difference checks, scaling benchmarks, alpha export."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from dattn.attention import (
    AttentionConfig,
    Merge,
    MixedSequence,
    V2VMode,
    causal_self_attention_oracle,
    decomposed_attention,
    init_attention_weights,
    make_sequence,
    v2v_self_attention,
)
from dattn.model import AlphaRecord
from dattn.posenc import PositionMode
from dattn.tensor import Rng, precision_name, resolve_dtype

log = logging.getLogger(__name__)

DEFAULT_N = (0, 1, 2, 8, 64)
DEFAULT_M = (1, 2, 8, 64)
DEFAULT_HEADS = (1, 2, 4)
DEFAULT_SEEDS = tuple(range(20))
DEFAULT_D_MODEL = 32
DEFAULT_TOL = {"f64": 1e-10, "f32": 1e-4}
ALPHA_TOL = 1e-10

DEFAULT_V_GRID = (256, 512, 1024, 2048, 4096)
BENCH_REPEATS = 9
BENCH_WARMUP = 3
MIN_FIT_POINTS = 4
MIN_SAMPLE_S = 2e-3

EXACT_CONFIG = (PositionMode.BIASED, V2VMode.FULL, Merge.ALPHA)


# -- serialization -----------------------------------------------------------


def format_float(x: float) -> str:
    """17 significant digits; integral values keep a trailing ``.0``."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = format(x, ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written at 17 significant digits.

    Non-finite floats come out as the JavaScript literals ``Infinity``/``NaN``,
    which Python's ``json`` module reads back.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    return json.dumps(obj)


# -- verification ------------------------------------------------------------


@dataclass
class CaseResult:
    case: dict
    max_abs_diff: float
    tol: float
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tol

    def to_dict(self) -> dict:
        d = {"case": self.case, "max_abs_diff": self.max_abs_diff, "tol": self.tol, "pass": self.passed}
        d.update(self.extra)
        return d


@dataclass
class VerifyReport:
    cases: list[CaseResult] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.cases)

    @property
    def passed(self) -> int:
        return sum(c.passed for c in self.cases)

    @property
    def all_pass(self) -> bool:
        return self.passed == self.total

    @property
    def worst(self) -> float:
        return max((c.max_abs_diff for c in self.cases), default=0.0)

    def extend(self, other: "VerifyReport") -> "VerifyReport":
        self.cases.extend(other.cases)
        return self

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "total": self.total,
            "all_pass": self.all_pass,
            "cases": [c.to_dict() for c in self.cases],
        }

    def to_json(self) -> str:
        return dumps(self.to_dict()) + "\n"


def _max_abs(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        return math.inf
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)), initial=0.0))


def _case_descriptor(n, m, heads, seed, d_model, cfg: AttentionConfig, check: str) -> dict:
    return {
        "check": check,
        "n": n,
        "m": m,
        "heads": heads,
        "d_model": d_model,
        "seed": seed,
        "precision": cfg.precision,
        "position": cfg.position_mode.value,
        "v2v": cfg.v2v_mode.value,
        "merge": cfg.merge.value,
    }


def _invariant_violation(out, seq: MixedSequence, cfg: AttentionConfig) -> float:
    """Largest breach of the shape/range/identity invariants; 0 when all hold."""
    if out.visual_out.shape != seq.visual.shape or out.textual_out.shape != seq.textual.shape:
        return math.inf
    if not (np.isfinite(out.visual_out).all() and np.isfinite(out.textual_out).all()):
        return math.inf
    worst = 0.0
    if out.alpha_v is not None:
        a = out.alpha_v.astype(np.float64)
        worst = max(worst, float(np.max(np.maximum(a - 1.0, -a), initial=0.0)))
        worst = max(worst, float(np.max(np.abs(a + out.alpha_t - 1.0), initial=0.0)))
    return worst


def run_equivalence_sweep(
    n_values: Sequence[int] = DEFAULT_N,
    m_values: Sequence[int] = DEFAULT_M,
    heads: Sequence[int] = DEFAULT_HEADS,
    seeds: Iterable[int] = DEFAULT_SEEDS,
    tol: float | None = None,
    precision: str = "f64",
    d_model: int = DEFAULT_D_MODEL,
    configs: Sequence[tuple] = (EXACT_CONFIG,),
) -> VerifyReport:
    """Compare decomposed attention against the oracle over a grid.

    Exact configurations (biased, full V2V, alpha merge) are compared
    elementwise with the oracle. Any other configuration only has its
    invariants checked: output shapes, finiteness, alpha range and
    ``alpha_v + alpha_t == 1``. Failures are recorded, never raised.
    """
    precision = precision_name(resolve_dtype(precision))
    tol = DEFAULT_TOL[precision] if tol is None else tol
    report = VerifyReport()
    seeds = list(seeds)
    for (pos_mode, v2v, merge), h, n, m, seed in itertools.product(configs, heads, n_values, m_values, seeds):
        cfg = AttentionConfig(d_model, h, position_mode=pos_mode, v2v_mode=v2v, merge=merge, precision=precision)
        check = "exact" if cfg.is_exact else "invariant"
        desc = _case_descriptor(n, m, h, seed, d_model, cfg, check)
        rng = Rng(seed)
        w = init_attention_weights(rng, cfg)
        seq = make_sequence(rng, n, m, cfg)
        extra = {}
        try:
            out = decomposed_attention(seq, w, cfg)
            if cfg.is_exact:
                ref = causal_self_attention_oracle(seq, w, cfg)
                diff = max(_max_abs(out.visual_out, ref.visual_out), _max_abs(out.textual_out, ref.textual_out))
            else:
                diff = _invariant_violation(out, seq, cfg)
        except Exception as exc:  # recorded as a failing case
            diff = math.inf
            extra["error"] = f"{type(exc).__name__}: {exc}"
        report.cases.append(CaseResult(desc, diff, tol, extra))
    return report


def run_alpha_check(
    n_values: Sequence[int] = DEFAULT_N,
    m_values: Sequence[int] = DEFAULT_M,
    heads: Sequence[int] = DEFAULT_HEADS,
    seeds: Iterable[int] = DEFAULT_SEEDS,
    tol: float = ALPHA_TOL,
    precision: str = "f64",
    d_model: int = DEFAULT_D_MODEL,
) -> VerifyReport:
    """alpha_v from the log-sum-exp difference vs. the oracle's visual softmax mass.

    Each case also carries ``sum_error`` (``max |alpha_v + alpha_t - 1|``),
    ``in_range`` and, for ``n == 0``, ``zero_when_no_visual``.
    """
    report = VerifyReport()
    seeds = list(seeds)
    for h, n, m, seed in itertools.product(heads, n_values, m_values, seeds):
        cfg = AttentionConfig(d_model, h, precision=precision)
        rng = Rng(seed)
        w = init_attention_weights(rng, cfg)
        seq = make_sequence(rng, n, m, cfg)
        out = decomposed_attention(seq, w, cfg)
        ref = causal_self_attention_oracle(seq, w, cfg)
        a = out.alpha_v
        extra = {
            "sum_error": float(np.max(np.abs(a.astype(np.float64) + out.alpha_t - 1.0))),
            "in_range": bool(((a >= 0) & (a <= 1)).all()),
        }
        if n == 0:
            extra["zero_when_no_visual"] = bool((a == 0).all())
        desc = _case_descriptor(n, m, h, seed, d_model, cfg, "alpha")
        report.cases.append(CaseResult(desc, _max_abs(a, ref.alpha_v), tol, extra))
    return report


def _fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    grad = np.empty_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def run_gradient_check(
    n_visual: int = 4,
    n_textual: int = 4,
    d_model: int = 16,
    n_heads: int = 2,
    seed: int = 0,
    step: float = 1e-4,
    tol: float = 1e-6,
    zero_inputs: bool = False,
) -> VerifyReport:
    """Central-difference input gradients of ``sum(textual_out)`` on both paths.

    Always runs in float64. ``fd_error_estimate`` is ``max |g(step) - g(step/2)|``
    for the decomposed path, a proxy for the truncation error at this step.
    """
    cfg = AttentionConfig(d_model, n_heads, precision="f64")
    rng = Rng(seed)
    w = init_attention_weights(rng, cfg)
    seq = make_sequence(rng, n_visual, n_textual, cfg)
    x = np.concatenate([seq.visual, seq.textual], axis=0)
    if zero_inputs:
        x = np.zeros_like(x)

    def loss(path):
        def f(z):
            s = seq.with_tokens(z[:n_visual], z[n_visual:])
            return float(np.sum(path(s, w, cfg).textual_out))
        return f

    g_dec = _fd_gradient(loss(decomposed_attention), x.copy(), step)
    g_ref = _fd_gradient(loss(causal_self_attention_oracle), x.copy(), step)
    g_half = _fd_gradient(loss(decomposed_attention), x.copy(), step / 2)
    desc = {
        "check": "gradient",
        "n": n_visual,
        "m": n_textual,
        "heads": n_heads,
        "d_model": d_model,
        "seed": seed,
        "precision": "f64",
        "step": step,
        "zero_inputs": zero_inputs,
    }
    extra = {
        "fd_error_estimate": _max_abs(g_dec, g_half),
        "grad_max_abs": float(np.max(np.abs(g_ref))),
    }
    return VerifyReport([CaseResult(desc, _max_abs(g_dec, g_ref), tol, extra)])


# -- benchmarking ------------------------------------------------------------


@dataclass
class BenchPoint:
    n: int
    mode: str
    median_s: float | None
    oom: bool = False
    est_bytes: int = 0

    def to_dict(self) -> dict:
        return {"n": self.n, "mode": self.mode, "median_s": self.median_s, "oom": self.oom, "est_bytes": self.est_bytes}


@dataclass
class BenchReport:
    config: dict
    points: list[BenchPoint]
    exponents: dict[str, float | None]

    def median(self, mode: str, n: int) -> float | None:
        for p in self.points:
            if p.mode == mode and p.n == n:
                return p.median_s
        return None

    def ratios(self, num: str = "full", den: str = "diag") -> list[tuple[int, float | None]]:
        out = []
        for n in self.config["v_grid"]:
            a, b = self.median(num, n), self.median(den, n)
            out.append((n, a / b if a is not None and b else None))
        return out

    def ratio_increasing(self, num: str = "full", den: str = "diag") -> bool | None:
        vals = [r for _, r in self.ratios(num, den) if r is not None]
        if len(vals) < 2:
            return None
        return all(b > a for a, b in zip(vals, vals[1:]))

    def to_dict(self) -> dict:
        d = {
            "config": self.config,
            "points": [p.to_dict() for p in self.points],
            "exponents": self.exponents,
        }
        modes = self.config["modes"]
        if "full" in modes and "diag" in modes:
            d["ratios"] = [{"n": n, "full_over_diag": r} for n, r in self.ratios()]
            d["ratio_increasing"] = self.ratio_increasing()
        return d

    def to_json(self) -> str:
        return dumps(self.to_dict()) + "\n"

    def table(self) -> str:
        modes = self.config["modes"]
        both = "full" in modes and "diag" in modes
        head = f"{'|V|':>7} " + " ".join(f"{m + ' (ms)':>12}" for m in modes) + (f" {'full/diag':>10}" if both else "")
        lines = [head, "-" * len(head)]
        ratios = dict(self.ratios()) if both else {}
        for n in self.config["v_grid"]:
            cells = []
            for m in modes:
                p = next(p for p in self.points if p.n == n and p.mode == m)
                cells.append(f"{'OOM':>12}" if p.oom else f"{p.median_s * 1e3:12.3f}")
            row = f"{n:>7} " + " ".join(cells)
            if both:
                r = ratios.get(n)
                row += f" {r:10.2f}" if r is not None else f" {'-':>10}"
            lines.append(row)
        for m in modes:
            e = self.exponents.get(m)
            lines.append(f"exponent[{m}] = " + (f"{e:.3f}" if e is not None else "undefined"))
        return "\n".join(lines)


def fit_exponent(ns: Sequence[int], times: Sequence[float]) -> float | None:
    """Slope of ``log t`` against ``log n``; None with fewer than four points."""
    if len(ns) < MIN_FIT_POINTS:
        return None
    slope, _ = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)


def estimate_bytes(n: int, m: int, cfg: AttentionConfig, mode: str, target: str) -> int:
    """Peak working-set estimate of one forward, used for the memory cap."""
    item = cfg.dtype.itemsize
    d, h = cfg.d_model, cfg.n_heads
    if mode == "full":
        # logits, masked logits, exp, probs
        total = 4 * h * n * n + 6 * n * d
    else:
        total = 3 * n * d
    if target == "forward":
        total += 4 * h * m * (n + m) + 10 * m * d
    return int(total * item)


def _time_call(fn: Callable[[], object], repeats: int, warmup: int, min_sample_s: float = MIN_SAMPLE_S) -> float:
    """Median seconds per call over ``repeats`` samples.

    Calls that finish faster than ``min_sample_s`` are looped inside each
    sample (loop count fixed during warmup) so timer resolution and
    scheduler jitter do not dominate.
    """
    inner = 1
    for _ in range(max(warmup, 1)):
        t0 = time.perf_counter_ns()
        fn()
        single = (time.perf_counter_ns() - t0) * 1e-9
        inner = max(inner, min(int(min_sample_s / max(single, 1e-9)) + 1, 10_000))
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter_ns() - t0) * 1e-9 / inner)
    return statistics.median(samples)


def run_scaling_bench(
    v_grid: Sequence[int] = DEFAULT_V_GRID,
    m: int = 8,
    modes: Sequence[str] = ("full", "diag"),
    d_model: int = 64,
    n_heads: int = 2,
    precision: str = "f32",
    seed: int = 0,
    repeats: int = BENCH_REPEATS,
    warmup: int = BENCH_WARMUP,
    mem_cap: int | None = None,
    target: str = "v2v",
) -> BenchReport:
    """Median wall-clock time per forward for each ``|V|`` and V2V mode.

    ``target="v2v"`` times the visual self-attention block alone;
    ``"forward"`` times the whole decomposed attention. Inputs and weights are
    built before the timed region. Points whose estimated working set exceeds
    ``mem_cap`` bytes (or that raise ``MemoryError``) are marked OOM.
    """
    modes = [V2VMode(mo).value for mo in modes]
    if target not in ("v2v", "forward"):
        raise ValueError(f"unknown bench target {target!r}")
    v_grid = list(v_grid)
    base = AttentionConfig(d_model, n_heads, precision=precision)
    rng = Rng(seed)
    w = init_attention_weights(rng, base)
    jobs = []
    for n in v_grid:
        seq = make_sequence(rng, n, m, base)
        for mode in modes:
            cfg = base.with_(v2v_mode=mode)
            if target == "v2v":
                fn = partial(v2v_self_attention, seq.visual, w, seq.positions.v2v_positions, cfg, mode)
            else:
                fn = partial(decomposed_attention, seq, w, cfg)
            jobs.append((n, mode, estimate_bytes(n, m, cfg, mode, target), fn))

    oom: set[tuple[int, str]] = set()
    points: list[BenchPoint] = []
    with threadpool_limits(limits=1):
        # One discarded pass over the whole grid lets the allocator settle on
        # its large-block strategy before anything is timed.
        for n, mode, need, fn in jobs:
            if mem_cap is not None and need > mem_cap:
                oom.add((n, mode))
                continue
            try:
                fn()
            except MemoryError:
                oom.add((n, mode))
        for n, mode, need, fn in jobs:
            t = None
            if (n, mode) not in oom:
                try:
                    t = _time_call(fn, repeats, warmup)
                except MemoryError:
                    oom.add((n, mode))
            points.append(BenchPoint(n, mode, t, oom=(n, mode) in oom, est_bytes=need))
    exponents = {}
    for mode in modes:
        ok = [p for p in points if p.mode == mode and not p.oom]
        exp = fit_exponent([p.n for p in ok], [p.median_s for p in ok])
        if exp is None:
            log.warning("exponent for %s undefined: %d usable grid point(s), need %d", mode, len(ok), MIN_FIT_POINTS)
        exponents[mode] = exp
    config = {
        "v_grid": v_grid,
        "m": m,
        "modes": modes,
        "d_model": d_model,
        "n_heads": n_heads,
        "precision": base.precision,
        "seed": seed,
        "repeats": repeats,
        "warmup": warmup,
        "mem_cap": mem_cap,
        "target": target,
    }
    return BenchReport(config, points, exponents)


# -- alpha export ------------------------------------------------------------


def mean_csv_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}_mean{path.suffix or '.csv'}")


def export_alpha_csv(record: AlphaRecord, path: str | Path, mean_path: str | Path | None = None) -> tuple[Path, Path]:
    """Write per-token alpha_v and per-head token means.

    The first file has columns ``layer,head,token,alpha``; the second
    ``layer,head,alpha_mean`` with heads ordered by ascending mean inside each
    layer, ties kept in head-index order.
    """
    path = Path(path)
    mean_path = Path(mean_path) if mean_path is not None else mean_csv_path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["layer", "head", "token", "alpha"])
        for layer, head, token, a in record.entries():
            wr.writerow([layer, head, token, format_float(a)])
    means = record.token_mean()
    order = record.sorted_head_order()
    with mean_path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["layer", "head", "alpha_mean"])
        for layer in range(record.n_layers):
            for head in order[layer]:
                wr.writerow([layer, int(head), format_float(means[layer, head])])
    return path, mean_path
