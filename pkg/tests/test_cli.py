import csv
import io
import re
import subprocess
import sys

import numpy as np
import pytest

from winoprune.bench import BENCH_COLUMNS
from winoprune.cli import main
from winoprune.experiment import REPORT_COLUMNS
from winoprune.perf import SPEEDUP_COLUMNS
from winoprune.tensor import load_wgt1, save_wgt1
from winoprune.transforms import f2x2_3x3_transforms

from test_checkpoint_experiment import TINY


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_perf_model_trivial_alpha_one(tmp_path, capsys):
    layers = tmp_path / "l.cfg"
    layers.write_text("[conv]\nc = 16\nk = 32\nh = 12\nr = 3\n")
    assert main(["perf-model", "--layers", str(layers), "--alpha", "1",
                 "--density-grid", "1:1:1"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 1 and list(rows[0]) == SPEEDUP_COLUMNS
    assert rows[0]["speedup_sparse"] == "1.0"
    assert rows[0]["speedup_sparse_winograd"] == rows[0]["speedup_winograd"]


def test_perf_model_machine_balance(capsys):
    assert main(["perf-model", "--density-grid", "0.1:1:2", "--machine-balance", "8"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 8 and {r["bound"] for r in rows} <= {"compute", "bandwidth"}


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--seed", "7", "--shape", "1x6x6", "--tile", "2"]) == 0
    out = capsys.readouterr().out
    worst = float(re.search(r"^max_rel_err=(\S+)$", out, re.M).group(1))
    assert worst < 1e-6


def test_grad_check_tolerance_failure_exit_code():
    assert main(["grad-check", "--tol", "0"]) == 2


def test_conv_zero_weights(tmp_path):
    rng = np.random.default_rng(0)
    save_wgt1(tmp_path / "img.wgt", rng.normal(size=(2, 7, 7)))
    save_wgt1(tmp_path / "w.wgt", np.zeros((3, 2, 3, 3)))
    assert main(["conv", "--input", str(tmp_path / "img.wgt"), "--weights",
                 str(tmp_path / "w.wgt"), "--out", str(tmp_path / "o.wgt")]) == 0
    out = load_wgt1(tmp_path / "o.wgt")
    assert out.shape == (3, 5, 5)
    np.testing.assert_array_equal(out, 0)


def test_conv_winograd_domain_matches_spatial(tmp_path):
    from winoprune.transforms import lift
    rng = np.random.default_rng(1)
    w = rng.normal(size=(2, 1, 3, 3))
    save_wgt1(tmp_path / "img.wgt", rng.normal(size=(1, 8, 8)))
    save_wgt1(tmp_path / "w.wgt", w)
    save_wgt1(tmp_path / "wf.wgt", lift(w, f2x2_3x3_transforms()))
    args = ["conv", "--input", str(tmp_path / "img.wgt")]
    assert main(args + ["--weights", str(tmp_path / "w.wgt"), "--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--weights", str(tmp_path / "wf.wgt"), "--domain", "winograd",
                        "--out", str(tmp_path / "b")]) == 0
    np.testing.assert_allclose(load_wgt1(tmp_path / "a"), load_wgt1(tmp_path / "b"), atol=1e-12)


def test_usage_errors(tmp_path, capsys):
    assert main(["perf-model", "--no-such-flag"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["grad-check", "--shape", "6x6"]) == 1
    assert main(["perf-model", "--density-grid", "0:1:log3"]) == 1
    assert main(["infer-bench", "--batch", "0"]) == 1
    assert main(["conv", "--input", str(tmp_path / "nope"), "--weights", "x",
                 "--out", "y"]) == 1
    (tmp_path / "bad.wgt").write_bytes(b"XXXX")
    assert main(["conv", "--input", str(tmp_path / "bad.wgt"), "--weights", "x",
                 "--out", "y"]) == 1
    assert main(["report", "--run", str(tmp_path)]) == 1


def test_gen_transforms_blocks(capsys):
    assert main(["gen-transforms"]) == 0
    blocks = capsys.readouterr().out.strip().split("\n\n")
    mats = {}
    for block in blocks:
        name, *rows = block.splitlines()
        mats[name] = np.array([[float(v) for v in r.split(",")] for r in rows])
    t = f2x2_3x3_transforms()
    assert sorted(mats) == ["A1", "A2", "B1", "B2", "G1", "G2"]
    np.testing.assert_array_equal(mats["G1"], t.g1)
    np.testing.assert_array_equal(mats["B1"], t.b1)
    assert mats["A1"].shape == (4, 2)


def test_gen_transforms_cook_toom_to_files(tmp_path, capsys):
    assert main(["gen-transforms", "--source", "cook-toom", "--tile", "4", "--kernel", "3",
                 "--out-dir", str(tmp_path)]) == 0
    assert load_wgt1(tmp_path / "G1.wgt").shape == (6, 3)
    assert main(["gen-transforms", "--tile", "9", "--kernel", "3"]) == 1


def test_experiment_commands_and_report(tmp_path, capsys):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    run = str(tmp_path / "run")
    for cmd in (["train"], ["prune"], ["finetune"], ["prune", "--method", "b"]):
        assert main(cmd + ["--config", str(cfg), "--out", run]) == 0
    capsys.readouterr()
    assert main(["report", "--run", run, "--phase", "finetune"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(REPORT_COLUMNS)
    rows = read_csv(out)
    assert [r["layer"] for r in rows] == ["conv1", "conv2"]
    assert main(["report", "--run", run, "--csv", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith(",".join(REPORT_COLUMNS))


def test_infer_bench_columns(tmp_path, capsys):
    layers = tmp_path / "l.ini"
    layers.write_text("[small]\nc = 4\nk = 4\nh = 6\nr = 3\n")
    assert main(["infer-bench", "--layers", str(layers), "--batch", "2",
                 "--density-sweep", "0.5:1:2", "--repeats", "1"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 2 and list(rows[0]) == BENCH_COLUMNS
    assert all(int(r["wall_ns"]) > 0 for r in rows)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "winoprune", "perf-model", "--density-grid",
                           "1:1:1"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith(",".join(SPEEDUP_COLUMNS))
