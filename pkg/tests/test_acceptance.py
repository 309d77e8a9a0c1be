"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the lines are printed
even under output capture).
"""

import csv
import math
import statistics
import time

import numpy as np
import pytest

from prvrlab import autograd as ag
from prvrlab.analysis import collapse_metrics, ranker_confusion, spearman_vs_teacher
from prvrlab.autograd import Tensor
from prvrlab.cli import main as cli_main
from prvrlab.config import RunConfig
from prvrlab.encoders import encode_clips, encode_frames, encode_text
from prvrlab.losses import LossWeights, base_loss, cbva_loss, cbva_video, tcpl_loss, total_loss
from prvrlab.merging import SizedTokenSeq, adaptive_clips, clip_schedule, op_tome, op_tome_lengths, \
    select_merge_depth
from prvrlab.retrieval import Ranking, encode_queries, recall_at, recall_from_ranks
from prvrlab.train import load_datasets, train

from conftest import TINY_MERGE, tiny_batch


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\nAC{n:<2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
        assert ok, f"AC{n} {title}: {detail}"
    return emit


def test_ac01_schedule_exactness(report):
    t0 = time.perf_counter()
    levels = list(clip_schedule(32, 75, 5).levels)
    lengths = op_tome_lengths(128, 75, 32)
    seq = op_tome(np.random.default_rng(0).normal(size=(128, 16)))
    ms = (time.perf_counter() - t0) * 1e3
    ok = levels == [32, 20, 12, 8, 6, 5] and lengths == [128, 80, 50, 32] and len(seq) == 32 and ms < 1.0
    report(1, "schedule exactness", ok, f"{levels}, {'->'.join(map(str, lengths))}, {ms:.3f} ms")


def test_ac02_optome_structure(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, bad = 0.0, []
    n = 1000
    for i in range(n):
        L = int(rng.integers(33, 257))
        frames = rng.normal(size=(L, 16))
        seq = op_tome(frames)
        spans = seq.spans()
        starts = np.array([s for s, _ in spans])
        ends = np.array([e for _, e in spans])
        if not (starts[0] == 0 and ends[-1] == L and np.all(starts[1:] == ends[:-1]) and np.all(ends > starts)):
            bad.append(i)
        if int(seq.sizes.sum()) != L or not np.array_equal(seq.sizes, ends - starts):
            bad.append(i)
        csum = np.vstack([np.zeros((1, 16)), np.cumsum(frames, axis=0)])
        means = (csum[ends] - csum[starts]) / (ends - starts)[:, None]
        worst = max(worst, float(np.abs(means - seq.tokens).max()))
    secs = time.perf_counter() - t0
    ok = not bad and worst <= 1e-6 and secs < 10
    report(2, "order-preserving merge structure", ok,
           f"{n} inputs, {len(bad)} violations, max mean err {worst:.1e}, {secs:.2f} s")


def _sub_loss_checks(seed):
    batch, params, _ = tiny_batch(seed)
    merge, w = TINY_MERGE, LossWeights()
    with ag.no_grad():
        _, tp = encode_text(batch.words, params, batch.word_lengths)
        vf = encode_frames(batch.frames, params, batch.frame_lengths)
        ct, cs, cl = batch.clip_arrays()
        vc = encode_clips(ct, cs, params, cl)
    tp, vf, vc = (Tensor(x.data.copy(), requires_grad=True) for x in (tp, vf, vc))
    fmask = np.arange(vf.shape[1])[None] < batch.frame_lengths[:, None]
    cmask = np.arange(vc.shape[1])[None] < cl[:, None]
    results = [adaptive_clips(SizedTokenSeq(vc.data[b, :len(s)], s.sizes, s.provenance), s.tokens,
                              merge.schedule(), merge.tau, merge.mode) for b, s in enumerate(batch.clips)]
    terms = {
        "nce_clip": lambda a, b, c: base_loss(a, b, c, batch.pairing, w, fmask, cmask)["nce_clip"],
        "trip_clip": lambda a, b, c: base_loss(a, b, c, batch.pairing, w, fmask, cmask)["trip_clip"],
        "nce_frame": lambda a, b, c: base_loss(a, b, c, batch.pairing, w, fmask, cmask)["nce_frame"],
        "trip_frame": lambda a, b, c: base_loss(a, b, c, batch.pairing, w, fmask, cmask)["trip_frame"],
        "tcpl_e": lambda a, b, c: tcpl_loss(batch.teacher, a, w, seed)[0],
        "tcpl_a": lambda a, b, c: tcpl_loss(batch.teacher, a, w, seed)[1],
        "cbva": lambda a, b, c: cbva_loss(b, c, results, batch.frame_lengths),
    }
    out = {}
    for name, f in terms.items():
        out[name] = ag.grad_check(f, [tp, vf, vc], tol=1e-4, max_coords=40, seed=seed).max_rel_err
    f = lambda *_: total_loss(batch, params, w, merge, seed=seed).total
    out["total"] = ag.grad_check(f, params.values(), tol=1e-4, max_coords=3, seed=seed).max_rel_err
    out["_depths"] = [r.depth for r in results]
    return out


def test_ac03_gradient_checks(report):
    t0 = time.perf_counter()
    worst, merged = {}, 0
    for seed in range(10):
        errs = _sub_loss_checks(seed)
        merged += sum(d > 1 for d in errs.pop("_depths"))
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    secs = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and secs < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, "gradient checks, 10 seeds, 2 videos / 4 queries", ok,
           f"{detail}; {merged} merged-clip videos; {secs:.1f} s")


def test_ac04_tcpl_invariance(report):
    rng = np.random.default_rng(4)
    t, s = rng.normal(size=(8, 6)), rng.normal(size=(8, 5))
    e0, a0 = (float(x.data) for x in tcpl_loss(t, s))
    e_dev = max(abs(float(tcpl_loss(c * t, s)[0].data) - e0) for c in (0.1, 3.0, 100.0))
    a_dev = 0.0
    for _ in range(20):
        Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        tt = rng.uniform(0.05, 20.0) * t @ Q + rng.normal(size=6) * 10
        a_dev = max(a_dev, abs(float(tcpl_loss(tt, s)[1].data) - a0))
    ce, ca = (abs(float(x.data)) for x in tcpl_loss(t, t.copy()))
    ok = e_dev <= 1e-6 and a_dev <= 1e-6 and ce <= 1e-10 and ca <= 1e-10
    report(4, "relational distillation invariances", ok,
           f"scale dev {e_dev:.1e}, similarity dev {a_dev:.1e}, self-copy ({ce:.1e}, {ca:.1e})")


def test_ac05_alignment_degenerate_values(report):
    rng = np.random.default_rng(5)
    one = float(cbva_video(Tensor(rng.normal(size=(9, 4))), Tensor(rng.normal(size=(1, 4))),
                           np.zeros(9, dtype=int)).data)
    hand = float(cbva_video(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), [0, 1]).data)
    ok = one == 0.0 and abs(hand - 2 * math.log(2)) <= 1e-9
    report(5, "alignment loss degenerate values", ok, f"single clip {one}, hand case {hand:.12f}")


def test_ac06_adaptive_selection(report):
    table = [(0.5, 6, 1), (0.9, 6, 2), (1 - 1 / 6, 6, 1), (1.0, 6, 2), (0.0, 6, 1), (0.75, 4, 1),
             (0.7501, 4, 2), (1 - 1 / 3, 3, 1), (0.99, 1, 1), (0.5, 2, 1), (0.5001, 2, 2)]
    lit = all(select_merge_depth(w, K, "literal") == k for w, K, k in table)
    grid = np.linspace(0, 1, 100)
    mono = [select_merge_depth(w, 6, "monotone") for w in grid]
    nondecreasing = all(a <= b for a, b in zip(mono, mono[1:]))
    report(6, "merge-depth selection", lit and nondecreasing,
           f"{len(table)} literal cases, monotone range {mono[0]}..{mono[-1]}")


def test_ac07_metric_oracles(report):
    vids = [f"v{i:03d}" for i in range(150)]
    rankings = [Ranking(f"q{i}", vids, np.zeros(150)) for i in range(3)]
    rep = recall_at(rankings, {"q0": vids[0], "q1": vids[2], "q2": vids[11]})
    rng = np.random.default_rng(7)
    ra, rb = rng.integers(1, 60, size=200), rng.integers(1, 60, size=200)
    marg = True
    for Q in (1, 5, 10, 100):
        c = ranker_confusion(ra, rb, Q)
        marg &= 100 * (c["both"] + c["a_only"]) / 200 == recall_from_ranks(ra, (Q,)).recall[Q]
        marg &= 100 * (c["both"] + c["b_only"]) / 200 == recall_from_ranks(rb, (Q,)).recall[Q]
    teacher = rng.normal(size=(12, 6))
    Qm, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    ident = spearman_vs_teacher(teacher @ Qm, teacher).value
    tu = teacher / np.linalg.norm(teacher, axis=1, keepdims=True)
    G = tu @ tu.T
    M = (np.linalg.eigvalsh(G).max() + 0.5) * np.eye(12) - G + 2.0
    w, V = np.linalg.eigh(M)
    rev = spearman_vs_teacher(V * np.sqrt(np.clip(w, 0, None)), teacher).value
    ok = abs(rep.sum_r - 266.67) <= 0.01 and marg and abs(ident - 100) < 1e-9 and abs(rev + 100) < 1e-9
    report(7, "metric oracles", ok, f"SumR {rep.sum_r:.4f}, marginals {'exact' if marg else 'off'}, "
                                    f"spearman {ident:.4f} / {rev:.4f}")


def test_ac08_collapse_oracle(report):
    e = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0]])
    r = collapse_metrics(e, [0, 0, 1, 1])
    report(8, "collapse metric oracle", abs(r.diff_norm - 0.5) <= 1e-9,
           f"intra {r.intra_sim:.6f}, total {r.total_sim:.6f}, diff_norm {r.diff_norm:.12f}")


BASE_ONLY = ["loss.lambda_e=0", "loss.lambda_a=0", "loss.lambda_cbva=0"]


@pytest.mark.slow
def test_ac09_ablation_trend(report):
    t0 = time.perf_counter()
    runs = {"full": [], "base": []}
    for seed in range(3):
        for name, extra in (("full", []), ("base", BASE_ONLY)):
            cfg = RunConfig.load(overrides=[f"train.seed={seed}", f"data.synth.seed={seed}",
                                            "data.synth.n_videos=200", "data.synth.events_per_video=4",
                                            "data.synth.queries_per_video=3", "data.eval_videos=200"] + extra)
            train_ds, eval_ds = load_datasets(cfg)
            res = train(cfg, train_ds, eval_ds)
            q = encode_queries(train_ds.queries, res.params)
            c = collapse_metrics(q, [x.video_id for x in train_ds.queries])
            runs[name].append((res.best_sum_r, c.diff_norm))
    secs = time.perf_counter() - t0
    med = {k: (statistics.median(r[0] for r in v), statistics.median(r[1] for r in v)) for k, v in runs.items()}
    ok = med["full"][0] >= med["base"][0] and med["full"][1] < med["base"][1] and secs < 600
    per_seed = "; ".join(f"seed {i}: SumR {runs['full'][i][0]:.2f}/{runs['base'][i][0]:.2f}, "
                         f"diff_norm {runs['full'][i][1]:.4f}/{runs['base'][i][1]:.4f}" for i in range(3))
    report(9, "ablation trend, full vs base objective", ok,
           f"median SumR {med['full'][0]:.2f} vs {med['base'][0]:.2f}, median text diff_norm "
           f"{med['full'][1]:.4f} vs {med['base'][1]:.4f}, {secs:.0f} s; {per_seed}")


def test_ac10_bench_table(report, tmp_path):
    sizes = [100, 200, 300, 400, 474]
    t0 = time.perf_counter()
    code = cli_main(["bench", "--sizes", ",".join(map(str, sizes)), "--runs", "5", "--out", str(tmp_path)])
    secs = time.perf_counter() - t0
    with open(tmp_path / "bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    ok = (code == 0 and list(rows[0]) == ["size", "time_ms", "memory_mb"]
          and [int(r["size"]) for r in rows] == sizes
          and all(0 < float(r["time_ms"]) < math.inf and float(r["memory_mb"]) > 0 for r in rows))
    lat = ", ".join(f"{r['size']}: {float(r['time_ms']):.3f} ms" for r in rows)
    report(10, "latency bench table", ok, f"{lat}; {secs:.1f} s total")
