import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from prvrlab.cli import main
from prvrlab.data import write_features

TINY = ["-o", "data.synth.n_videos=8", "-o", "data.eval_videos=6", "-o", "data.synth.frames_per_video=40",
        "-o", "data.synth.d_v=8", "-o", "data.synth.d_q=8", "-o", "encoder.d=8", "-o", "train.epochs=1"]


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), "--seed", "1"] + TINY) == 0
    return out / "best.ckpt"


def test_merge_prints_schedule(tmp_path, capsys):
    write_features(tmp_path / "f.prvf", np.random.default_rng(0).normal(size=(128, 8)).astype(np.float32))
    assert main(["merge", "--input", str(tmp_path / "f.prvf"), "--rate", "75", "--target", "32"]) == 0
    assert capsys.readouterr().out.strip() == "128 -> 80 -> 50 -> 32"


def test_merge_writes_only_under_out(tmp_path):
    write_features(tmp_path / "f.prvf", np.ones((40, 3), np.float32))
    before = set(tmp_path.rglob("*"))
    assert main(["merge", "--input", str(tmp_path / "f.prvf"), "--target", "8"]) == 0
    assert set(tmp_path.rglob("*")) == before
    assert main(["merge", "--input", str(tmp_path / "f.prvf"), "--target", "8", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "clips.csv").exists()


def test_missing_checkpoint_exit_2(tmp_path, capsys):
    missing = tmp_path / "nowhere.ckpt"
    assert main(["eval", "--checkpoint", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) != 0
    assert "usage" in capsys.readouterr().err


def test_invalid_config_exit_1_missing_input_exit_2(capsys):
    assert main(["train", "-o", "loss.lambda_zz=1"]) == 1
    assert main(["merge", "--input", "x.prvf", "--target", "0"]) == 2


def test_eval_writes_one_row_per_cutoff(checkpoint, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(checkpoint), "--out", str(tmp_path)] + TINY) == 0
    rows = rows_of((tmp_path / "eval.csv").read_text())
    assert [r["metric"] for r in rows] == ["R@1", "R@5", "R@10", "R@100", "SumR"]
    assert float(rows[-1]["value"]) == pytest.approx(sum(float(r["value"]) for r in rows[:-1]), abs=1e-3)


def test_analyze_reports(checkpoint, tmp_path):
    assert main(["analyze", "--checkpoint", str(checkpoint), "--out", str(tmp_path)] + TINY) == 0
    collapse = rows_of((tmp_path / "collapse.csv").read_text())
    assert [r["modality"] for r in collapse] == ["text", "video"]
    conf = rows_of((tmp_path / "confusion.csv").read_text())
    assert all(int(r["both"]) + int(r["a_only"]) + int(r["b_only"]) + int(r["neither"]) == int(r["n"])
               for r in conf)


def test_bench_csv(tmp_path):
    assert main(["bench", "--sizes", "3,6", "--runs", "2", "--queries", "5", "--out", str(tmp_path)] + TINY) == 0
    rows = rows_of((tmp_path / "bench.csv").read_text())
    assert [r["size"] for r in rows] == ["3", "6"]
    assert list(rows[0]) == ["size", "time_ms", "memory_mb"]


def test_sweep_tau_rows(tmp_path, capsys):
    assert main(["sweep-tau", "0.5", "0.6", "0.7", "0.8", "--out", str(tmp_path)] + TINY) == 0
    rows = rows_of((tmp_path / "sweep_tau.csv").read_text())
    assert [float(r["tau"]) for r in rows] == [0.5, 0.6, 0.7, 0.8]


def test_gen_synth_then_train_from_manifest(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path / "ds")] + TINY) == 0
    m = tmp_path / "ds" / "train" / "manifest.json"
    e = tmp_path / "ds" / "eval" / "manifest.json"
    assert m.exists() and e.exists()
    args = ["train", "-o", f'data.train_manifest="{m}"', "-o", f'data.eval_manifest="{e}"'] + TINY
    assert main(args) == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "prvrlab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep-tau" in r.stdout
