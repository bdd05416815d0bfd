import csv
import json

import numpy as np
import pytest

from dattn.harness import (
    BenchReport,
    BenchPoint,
    dumps,
    export_alpha_csv,
    fit_exponent,
    format_float,
    mean_csv_path,
    run_alpha_check,
    run_equivalence_sweep,
    run_gradient_check,
    run_scaling_bench,
)
from dattn.attention import Merge, V2VMode
from dattn.model import AlphaRecord
from dattn.posenc import PositionMode


def test_format_float_17_digits():
    assert format_float(0.1) == "0.10000000000000001"
    assert format_float(0.0) == "0.0"
    assert format_float(2.0) == "2.0"
    assert format_float(1e-20) == "9.9999999999999995e-21"
    assert format_float(float("inf")) == "Infinity"


def test_dumps_round_trips():
    obj = {"a": [1, 2.5, None, True], "b": {"c": "x", "d": float("-inf")}, "e": []}
    assert json.loads(dumps(obj)) == obj


def test_small_sweep_passes():
    rep = run_equivalence_sweep((0, 3), (1, 4), (1, 2), range(3))
    assert rep.total == 2 * 2 * 2 * 3 and rep.all_pass
    assert all(c.case["check"] == "exact" for c in rep.cases)


def test_zero_tolerance_fails():
    rep = run_equivalence_sweep((2, 8), (2, 8), (2,), range(3), tol=0.0)
    assert rep.passed < rep.total
    assert all(c.passed == (c.max_abs_diff <= c.tol) for c in rep.cases)


def test_empty_seed_list():
    rep = run_equivalence_sweep(seeds=[])
    assert (rep.passed, rep.total) == (0, 0)
    assert json.loads(rep.to_json())["cases"] == []


def test_invariant_configs():
    configs = [
        (PositionMode.DEBIASED, V2VMode.DIAGONAL, Merge.ALPHA),
        (PositionMode.BIASED, V2VMode.FULL, Merge.TANH),
        (PositionMode.DEBIASED, V2VMode.FULL, Merge.CASCADE),
    ]
    rep = run_equivalence_sweep((0, 4), (1, 3), (2,), range(2), configs=configs)
    assert rep.all_pass
    assert {c.case["check"] for c in rep.cases} == {"invariant"}


def test_sweep_f32():
    rep = run_equivalence_sweep((0, 8), (1, 8), (2,), range(2), precision="f32")
    assert rep.all_pass and rep.cases[0].tol == 1e-4


def test_alpha_check():
    rep = run_alpha_check((0, 5), (1, 4), (1, 2), range(2))
    assert rep.all_pass
    for c in rep.cases:
        assert c.extra["in_range"] and c.extra["sum_error"] <= np.finfo(float).eps
        if c.case["n"] == 0:
            assert c.extra["zero_when_no_visual"]


def test_report_deterministic():
    a = run_equivalence_sweep((0, 2), (1, 2), (2,), range(2)).to_json()
    b = run_equivalence_sweep((0, 2), (1, 2), (2,), range(2)).to_json()
    assert a == b
    data = json.loads(a)
    case = data["cases"][0]
    assert set(case) == {"case", "max_abs_diff", "tol", "pass"}
    assert {"n", "m", "heads", "seed"} <= set(case["case"])


def test_gradient_check_default():
    rep = run_gradient_check()
    (case,) = rep.cases
    assert case.passed and case.max_abs_diff <= 1e-6
    assert case.extra["grad_max_abs"] > 0


def test_gradient_check_large_step_reports_more_error():
    small = run_gradient_check(step=1e-4).cases[0].extra["fd_error_estimate"]
    large = run_gradient_check(step=1e-1).cases[0].extra["fd_error_estimate"]
    mid = run_gradient_check(step=1e-2).cases[0].extra["fd_error_estimate"]
    assert small < mid < large


def test_gradient_check_at_origin():
    rep = run_gradient_check(zero_inputs=True)
    assert rep.all_pass


def test_fit_exponent():
    ns = [256, 512, 1024, 2048]
    assert fit_exponent(ns, [3e-6 * n**2 for n in ns]) == pytest.approx(2.0)
    assert fit_exponent([256], [1.0]) is None
    assert fit_exponent(ns[:3], [1, 2, 3]) is None


def test_bench_small_grid_shapes():
    rep = run_scaling_bench([16, 32, 64, 128], m=2, d_model=16, n_heads=2, repeats=2, warmup=1)
    assert len(rep.points) == 8 and all(p.median_s > 0 for p in rep.points)
    assert set(rep.exponents) == {"full", "diag"}
    data = json.loads(rep.to_json())
    assert len(data["ratios"]) == 4
    assert "full" in rep.table() and "exponent[diag]" in rep.table()


def test_bench_forward_target():
    rep = run_scaling_bench([16, 32, 64, 128], m=4, d_model=16, n_heads=2, repeats=1, warmup=0, target="forward")
    assert all(p.median_s > 0 for p in rep.points)


def test_bench_single_point_has_no_exponent():
    rep = run_scaling_bench([64], m=2, d_model=16, n_heads=2, repeats=1, warmup=0)
    assert rep.exponents == {"full": None, "diag": None}
    assert rep.ratio_increasing() is None
    assert "undefined" in rep.table()


def test_bench_memory_cap_marks_oom():
    rep = run_scaling_bench([64, 128, 256, 512], m=2, d_model=16, n_heads=2, repeats=1, warmup=0, mem_cap=2**20)
    full = {p.n: p for p in rep.points if p.mode == "full"}
    assert full[512].oom and full[512].median_s is None
    assert not full[64].oom
    assert not any(p.oom for p in rep.points if p.mode == "diag")
    assert "OOM" in rep.table()


def test_ratio_increasing_logic():
    cfg = {"v_grid": [1, 2, 3], "modes": ["full", "diag"]}
    pts = [BenchPoint(n, "full", t) for n, t in [(1, 2.0), (2, 8.0), (3, 18.0)]]
    pts += [BenchPoint(n, "diag", float(n)) for n in (1, 2, 3)]
    assert BenchReport(cfg, pts, {}).ratio_increasing()
    pts[1] = BenchPoint(2, "full", 1.0)
    assert not BenchReport(cfg, pts, {}).ratio_increasing()


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_export_alpha_cardinality(tmp_path):
    vals = np.arange(12, dtype=float).reshape(2, 2, 3) / 12
    path, mean_path = export_alpha_csv(AlphaRecord(vals), tmp_path / "a.csv")
    rows = _read(path)
    assert rows[0] == ["layer", "head", "token", "alpha"] and len(rows) == 13
    assert mean_path == mean_csv_path(tmp_path / "a.csv") == tmp_path / "a_mean.csv"
    means = _read(mean_path)
    assert means[0] == ["layer", "head", "alpha_mean"] and len(means) == 5


def test_export_alpha_sorted_and_stable(tmp_path):
    vals = np.zeros((1, 4, 2))
    vals[0, 0] = 0.9
    vals[0, 2] = 0.1
    _, mean_path = export_alpha_csv(AlphaRecord(vals), tmp_path / "a.csv")
    assert [r[1] for r in _read(mean_path)[1:]] == ["1", "3", "2", "0"]
    _, mean_path = export_alpha_csv(AlphaRecord(np.full((1, 3, 2), 0.5)), tmp_path / "b.csv")
    assert [r[1] for r in _read(mean_path)[1:]] == ["0", "1", "2"]


def test_export_alpha_zero_values(tmp_path):
    path, mean_path = export_alpha_csv(AlphaRecord(np.zeros((2, 2, 2))), tmp_path / "z.csv")
    assert {r[3] for r in _read(path)[1:]} == {"0.0"}
    assert {r[2] for r in _read(mean_path)[1:]} == {"0.0"}
