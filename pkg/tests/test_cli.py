import json
import subprocess
import sys

import pytest

from dattn.cli import main

SMALL = ["--n", "0,3", "--m", "1,4", "--heads", "1,2", "--seeds", "2"]


def test_verify_passes(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["verify", "--precision", "f64", "--out", str(out), *SMALL]) == 0
    data = json.loads(out.read_text())
    assert data["all_pass"] and data["total"] == 2 * 2 * 2 * 2 * 2 + 1
    assert "PASS" in capsys.readouterr().out


def test_verify_zero_tolerance_fails(tmp_path):
    assert main(["verify", "--tol", "0", "--out", str(tmp_path / "r.json"), *SMALL]) == 1


def test_verify_f32(tmp_path):
    assert main(["verify", "--precision", "f32", "--out", str(tmp_path / "r.json"), *SMALL]) == 0


def test_invalid_dims_exit_2(tmp_path, capsys):
    assert main(["verify", "--d-model", "30", "--heads", "4", "--out", str(tmp_path / "r.json")]) == 2
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "r.json").exists()


def test_argparse_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--precision", "f16"])
    assert exc.value.code == 2


def test_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DATTN_OUT_DIR", str(tmp_path))
    assert main(["verify", "--no-grad", *SMALL]) == 0
    assert (tmp_path / "verify_report.json").exists()


def test_bench_table(tmp_path, capsys):
    out = tmp_path / "b.json"
    rc = main(["bench", "--v-grid", "32,64,128,256", "--modes", "full,diag", "--d-model", "16",
               "--repeats", "2", "--warmup", "1", "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "full/diag" in text and "exponent[full]" in text
    data = json.loads(out.read_text())
    assert data["exponents"]["diag"] is not None and len(data["ratios"]) == 4


def test_bench_single_point_warns(tmp_path, capsys, caplog):
    rc = main(["bench", "--v-grid", "64", "--d-model", "16", "--repeats", "1", "--warmup", "0",
               "--out", str(tmp_path / "b.json")])
    assert rc == 0
    assert "undefined" in capsys.readouterr().out
    assert any("exponents need 4" in r.getMessage() for r in caplog.records)
    assert json.loads((tmp_path / "b.json").read_text())["exponents"]["full"] is None


def test_bench_mem_cap(tmp_path):
    out = tmp_path / "b.json"
    rc = main(["bench", "--v-grid", "64,128,256,512", "--d-model", "16", "--repeats", "1", "--warmup", "0",
               "--mem-cap", "1M", "--out", str(out)])
    assert rc == 0
    pts = json.loads(out.read_text())["points"]
    assert [p["oom"] for p in pts if p["mode"] == "full"][-1] is True


def test_bench_bad_mode(tmp_path):
    assert main(["bench", "--modes", "full,sparse", "--out", str(tmp_path / "b.json")]) == 2


def test_alpha_cardinality(tmp_path):
    out = tmp_path / "alpha.csv"
    assert main(["alpha", "--layers", "4", "--heads", "8", "--n", "64", "--m", "16", "--seed", "7", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4 * 8 * 16 + 1
    assert len((tmp_path / "alpha_mean.csv").read_text().splitlines()) == 4 * 8 + 1


def test_alpha_no_visual_is_zero(tmp_path):
    out = tmp_path / "alpha.csv"
    assert main(["alpha", "--layers", "2", "--heads", "2", "--n", "0", "--m", "3", "--d-model", "16", "--out", str(out)]) == 0
    values = {line.split(",")[3] for line in out.read_text().splitlines()[1:]}
    assert values == {"0.0"}


def _run(*args, cwd):
    return subprocess.run([sys.executable, "-m", "dattn.cli", *args], cwd=cwd, capture_output=True, text=True)


def test_alpha_byte_identical_across_processes(tmp_path):
    flags = ["alpha", "--layers", "3", "--heads", "4", "--n", "16", "--m", "8", "--seed", "7", "--d-model", "32"]
    for name in ("a", "b"):
        assert _run(*flags, "--out", f"{name}.csv", cwd=tmp_path).returncode == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_mean.csv").read_bytes() == (tmp_path / "b_mean.csv").read_bytes()


def test_demo_default(capsys):
    assert main(["demo"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("max |decomposed - oracle|")
    assert float(last.split("=")[1].split()[0]) <= 1e-10


def test_demo_debiased(capsys):
    assert main(["demo", "--position", "debiased"]) == 0
    out = capsys.readouterr().out
    assert "intentionally does not hold" in out
    assert "over text queries = 0.0" in out


def test_demo_tanh_gate_zero(capsys):
    assert main(["demo", "--merge", "tanh", "--gate", "0"]) == 0
    assert "visual contribution max |tanh(g) * XA| = 0.0" in capsys.readouterr().out


@pytest.mark.parametrize("merge", ["sigmoid", "cascade"])
def test_demo_other_merges(merge, capsys):
    assert main(["demo", "--merge", merge, "--v2v", "diag"]) == 0
    assert "oracle textual output" in capsys.readouterr().out
