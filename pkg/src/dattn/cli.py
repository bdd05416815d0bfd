"""Command-line entry point: ``dattn {verify,bench,alpha,demo}``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
Without ``--out`` files go to ``$DATTN_OUT_DIR`` (default: current directory).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dattn import harness
from dattn.attention import (
    AttentionConfig,
    Merge,
    V2VMode,
    causal_self_attention_oracle,
    decomposed_attention,
    init_attention_weights,
    make_sequence,
    t2t_self_attention,
    t2v_cross_attention,
    t2v_logits,
)
from dattn.model import init_layers, stack_forward
from dattn.posenc import PositionMode
from dattn.tensor import ConfigError, Rng, ShapeError, sigmoid

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OUT_DIR_ENV = "DATTN_OUT_DIR"

log = logging.getLogger("dattn")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _bytes(text: str) -> int:
    units = {"k": 2**10, "m": 2**20, "g": 2**30}
    t = text.strip().lower().rstrip("b")
    mult = units.get(t[-1:], 1)
    if mult != 1:
        t = t[:-1]
    try:
        return int(float(t) * mult)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad byte size {text!r}") from None


def _out_path(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_DIR_ENV, ".")) / default_name


def _check_dims(d_model: int, heads: list[int], n: list[int] = (), m: list[int] = (), layers: int = 1) -> None:
    if d_model < 1 or layers < 1 or not heads or any(h < 1 for h in heads):
        raise ConfigError("d_model, heads and layers must be positive")
    if any(x < 0 for x in n):
        raise ConfigError("visual token counts must be >= 0")
    if any(x < 1 for x in m):
        raise ConfigError("textual token counts must be >= 1")
    for h in heads:
        AttentionConfig(d_model, h)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base seed for every random draw")
    common.add_argument("--precision", choices=("f32", "f64"), default=None)
    common.add_argument("--out", default=None, help="output file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dattn", description="Decomposed attention verification and benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="oracle equivalence sweep and gradient check")
    v.add_argument("--n", type=_int_list, default=list(harness.DEFAULT_N), help="visual token counts")
    v.add_argument("--m", type=_int_list, default=list(harness.DEFAULT_M), help="textual token counts")
    v.add_argument("--heads", type=_int_list, default=list(harness.DEFAULT_HEADS))
    v.add_argument("--d-model", type=int, default=harness.DEFAULT_D_MODEL)
    v.add_argument("--seeds", type=int, default=len(harness.DEFAULT_SEEDS), help="number of seeds from --seed")
    v.add_argument("--tol", type=float, default=None, help="exactness tolerance (default 1e-10 f64, 1e-4 f32)")
    v.add_argument("--grad-step", type=float, default=1e-4)
    v.add_argument("--grad-tol", type=float, default=1e-6)
    v.add_argument("--no-grad", action="store_true", help="skip the finite-difference gradient check")

    b = sub.add_parser("bench", parents=[common], help="V2V scaling benchmark, full vs diagonal")
    b.add_argument("--v-grid", type=_int_list, default=list(harness.DEFAULT_V_GRID))
    b.add_argument("--m", type=int, default=8)
    b.add_argument("--modes", type=_str_list, default=["full", "diag"])
    b.add_argument("--d-model", type=int, default=64)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--repeats", type=int, default=harness.BENCH_REPEATS)
    b.add_argument("--warmup", type=int, default=harness.BENCH_WARMUP)
    b.add_argument("--mem-cap", type=_bytes, default=None, help="byte budget, e.g. 64M")
    b.add_argument("--target", choices=("v2v", "forward"), default="v2v")

    a = sub.add_parser("alpha", parents=[common], help="record alpha_v across layers/heads to CSV")
    a.add_argument("--layers", type=int, default=4)
    a.add_argument("--heads", type=int, default=8)
    a.add_argument("--n", type=int, default=64)
    a.add_argument("--m", type=int, default=16)
    a.add_argument("--d-model", type=int, default=64)
    a.add_argument("--position", choices=[x.value for x in PositionMode], default="biased")
    a.add_argument("--v2v", choices=[x.value for x in V2VMode], default="full")

    d = sub.add_parser("demo", parents=[common], help="print a small worked example")
    d.add_argument("--n", type=int, default=3)
    d.add_argument("--m", type=int, default=2)
    d.add_argument("--d-model", type=int, default=8)
    d.add_argument("--heads", type=int, default=2)
    d.add_argument("--position", choices=[x.value for x in PositionMode], default="biased")
    d.add_argument("--v2v", choices=[x.value for x in V2VMode], default="full")
    d.add_argument("--merge", choices=[x.value for x in Merge], default="alpha")
    d.add_argument("--gate", type=float, default=0.0, help="tanh/sigmoid gate value")
    return p


def cmd_verify(args) -> int:
    precision = args.precision or "f64"
    _check_dims(args.d_model, args.heads, args.n, args.m)
    if args.seeds < 0:
        raise ConfigError("--seeds must be >= 0")
    seeds = range(args.seed, args.seed + args.seeds)
    tol = args.tol if args.tol is not None else harness.DEFAULT_TOL[precision]
    report = harness.run_equivalence_sweep(args.n, args.m, args.heads, seeds, tol, precision, args.d_model)
    report.extend(harness.run_alpha_check(args.n, args.m, args.heads, seeds, tol, precision, args.d_model))
    if not args.no_grad:
        if precision == "f64":
            grad_tol = 0.0 if args.tol == 0 else args.grad_tol
            report.extend(harness.run_gradient_check(seed=args.seed, step=args.grad_step, tol=grad_tol))
        else:
            log.info("gradient check skipped: finite differences need f64")
    path = _out_path(args, "verify_report.json")
    path.write_text(report.to_json())
    by_check: dict[str, list] = {}
    for c in report.cases:
        by_check.setdefault(c.case["check"], []).append(c)
    for check, cases in by_check.items():
        worst = max(c.max_abs_diff for c in cases)
        print(f"{check:9s} {sum(c.passed for c in cases)}/{len(cases)} pass  worst diff {worst:.3e}")
    print(f"{'PASS' if report.all_pass else 'FAIL'}: {report.passed}/{report.total}, report at {path}")
    return EXIT_OK if report.all_pass else EXIT_FAIL


def cmd_bench(args) -> int:
    if not args.v_grid or any(n < 1 for n in args.v_grid):
        raise ConfigError("--v-grid needs positive sizes")
    if args.m < 1 or args.repeats < 1 or args.warmup < 0:
        raise ConfigError("--m and --repeats must be >= 1, --warmup >= 0")
    _check_dims(args.d_model, [args.heads])
    try:
        modes = [V2VMode(m).value for m in args.modes]
    except ValueError:
        raise ConfigError(f"--modes must be from full,diag; got {args.modes}") from None
    if len(args.v_grid) < harness.MIN_FIT_POINTS:
        log.warning("grid has %d point(s); scaling exponents need %d and will be undefined",
                    len(args.v_grid), harness.MIN_FIT_POINTS)
    report = harness.run_scaling_bench(
        args.v_grid, args.m, modes, args.d_model, args.heads, args.precision or "f32", args.seed,
        args.repeats, args.warmup, args.mem_cap, args.target,
    )
    path = _out_path(args, "bench_report.json")
    path.write_text(report.to_json())
    print(report.table())
    print(f"report at {path}")
    return EXIT_OK


def cmd_alpha(args) -> int:
    _check_dims(args.d_model, [args.heads], [args.n], [args.m], args.layers)
    cfg = AttentionConfig(args.d_model, args.heads, position_mode=args.position, v2v_mode=args.v2v,
                          precision=args.precision or "f64")
    rng = Rng(args.seed)
    layers = init_layers(rng, cfg, args.layers)
    seq = make_sequence(rng, args.n, args.m, cfg)
    _, record = stack_forward(seq, layers, cfg, record=True)
    path, mean_path = harness.export_alpha_csv(record, _out_path(args, "alpha.csv"))
    print(f"wrote {record.values.size} alpha values to {path} and head means to {mean_path}")
    return EXIT_OK


def _fmt(x) -> str:
    return np.array2string(np.asarray(x), precision=5, suppress_small=False, max_line_width=120)


def cmd_demo(args) -> int:
    _check_dims(args.d_model, [args.heads], [args.n], [args.m])
    cfg = AttentionConfig(args.d_model, args.heads, position_mode=args.position, v2v_mode=args.v2v,
                          merge=args.merge, precision=args.precision or "f64")
    rng = Rng(args.seed)
    w = init_attention_weights(rng, cfg, with_extra=True)
    w = _with_gate(w, cfg, args.gate)
    seq = make_sequence(rng, args.n, args.m, cfg)
    debiased = cfg.position_mode is PositionMode.DEBIASED
    if debiased and seq.n_visual >= 2:
        visual = seq.visual.copy()
        visual[1] = visual[0]
        seq = seq.with_tokens(visual, seq.textual)

    print(f"config: d_model={cfg.d_model} heads={cfg.n_heads} N={seq.n_visual} M={seq.n_textual} "
          f"position={cfg.position_mode.value} v2v={cfg.v2v_mode.value} merge={cfg.merge.value}")
    print(f"visual positions:  {list(seq.positions.visual_positions)}")
    print(f"textual positions: {list(seq.positions.textual_positions)}")

    pos = seq.positions
    xa, s_v = t2v_cross_attention(seq.textual, seq.visual, w, pos, cfg)
    sa, s_t = t2t_self_attention(seq.textual, w, pos, cfg)
    logits = t2v_logits(seq.textual, seq.visual, w, pos, cfg) if seq.n_visual else None
    for h in range(cfg.n_heads):
        print(f"\nhead {h}")
        if logits is not None:
            print("  T2V logits [text x visual]:\n  " + _fmt(logits[h]).replace("\n", "\n  "))
        print(f"  S_V     = {_fmt(s_v[:, h])}")
        print(f"  S_T     = {_fmt(s_t[:, h])}")
        if cfg.merge is Merge.ALPHA:
            print(f"  alpha_V = {_fmt(sigmoid(s_v[:, h] - s_t[:, h]))}")

    out = decomposed_attention(seq, w, cfg)
    print("\nmerged textual output:\n" + _fmt(out.textual_out))

    if debiased:
        print("\nnote: debiased positions change the T2V logits, so equivalence with the oracle intentionally does not hold")
        if logits is not None and seq.n_visual >= 2:
            dup = float(np.max(np.abs(logits[:, :, 0] - logits[:, :, 1])))
            print(f"visual tokens 0 and 1 are identical; max |logit(v0) - logit(v1)| over text queries = {dup!r}")
    if cfg.merge is Merge.TANH:
        contrib = float(np.max(np.abs(np.tanh(w.gate_g) * xa), initial=0.0))
        print(f"\ntanh gate g={w.gate_g!r}: visual contribution max |tanh(g) * XA| = {contrib!r}")

    ref_cfg = cfg.with_(position_mode=PositionMode.BIASED, v2v_mode=V2VMode.FULL)
    ref = causal_self_attention_oracle(seq.with_mode(PositionMode.BIASED), w, ref_cfg)
    print("\noracle textual output:\n" + _fmt(ref.textual_out))
    diff = max(
        float(np.max(np.abs(out.textual_out - ref.textual_out))),
        float(np.max(np.abs(out.visual_out - ref.visual_out), initial=0.0)),
    )
    tol = harness.DEFAULT_TOL[cfg.precision]
    verdict = "within" if diff <= tol else "exceeds"
    print(f"max |decomposed - oracle| = {diff:.3e} ({verdict} {tol:g})")
    return EXIT_OK


def _with_gate(w, cfg: AttentionConfig, gate: float):
    if cfg.merge is Merge.TANH:
        return replace(w, gate_g=gate)
    if cfg.merge is Merge.SIGMOID:
        return replace(w, gate_s=gate)
    return w


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "alpha": cmd_alpha, "demo": cmd_demo}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
