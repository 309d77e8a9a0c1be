"""Collapse diagnostics, rank correlation with the teacher space, ranker confusion, latency bench."""

from __future__ import annotations

import resource
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .retrieval import RetrievalIndex, gt_ranks, score_all, _order


@dataclass
class CollapseReport:
    intra_sim: float
    total_sim: float
    diff_norm: float
    degenerate: bool = False

    def row(self, modality: str) -> dict:
        return {"modality": modality, "intra_sim": self.intra_sim, "total_sim": self.total_sim,
                "diff_norm": self.diff_norm, "degenerate": self.degenerate}


def _unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ZeroDivisionError("zero-norm instance")
    return x / n


def collapse_metrics(embeddings, owner) -> CollapseReport:
    """Mean same-owner cosine (intra), mean all-pairs cosine (total) and their normalized gap.

    Both means run over ordered pairs ``i != j``; the total includes intra pairs.
    """
    emb = _unit(embeddings)
    owner = np.asarray(owner)
    n = len(emb)
    if n < 2 or owner.shape != (n,):
        raise ValueError("need >= 2 instances with one owner each")
    S = emb @ emb.T
    off = ~np.eye(n, dtype=bool)
    same = (owner[:, None] == owner[None, :]) & off
    if not same.any():
        raise ValueError("no owner has two instances; intra similarity is undefined")
    intra = float(S[same].mean())
    total = float(S[off].mean())
    denom = intra + total
    if denom == 0:
        return CollapseReport(intra, total, 0.0, degenerate=True)
    return CollapseReport(intra, total, (intra - total) / denom)


@dataclass
class SpearmanResult:
    value: float
    n_anchors: int
    skipped: int


def spearman_vs_teacher(student, teacher) -> SpearmanResult:
    """Mean over anchors of Spearman's rho between student and teacher cosine rankings, x100.

    For anchor ``i`` the other ``n - 1`` items are ranked by cosine in each
    space (average ranks for ties). Anchors whose similarities are constant in
    either space are skipped.
    """
    s = _unit(student)
    t = _unit(teacher)
    n = len(s)
    if n < 3 or len(t) != n:
        raise ValueError("need >= 3 paired rows")
    Ss, St = s @ s.T, t @ t.T
    rhos, skipped = [], 0
    for i in range(n):
        keep = np.arange(n) != i
        a, b = rankdata(Ss[i, keep]), rankdata(St[i, keep])
        a, b = a - a.mean(), b - b.mean()
        den = np.sqrt((a * a).sum() * (b * b).sum())
        if den == 0:
            skipped += 1
            continue
        rhos.append(float((a * b).sum() / den))
    if not rhos:
        raise ValueError("every anchor has constant similarities")
    if skipped:
        warnings.warn(f"{skipped} anchors skipped (constant similarities)", RuntimeWarning)
    return SpearmanResult(100.0 * float(np.mean(rhos)), len(rhos), skipped)


def ranker_confusion(ranks_a, ranks_b, Q: int) -> dict:
    """2x2 outcome counts for two rankers; success means ground-truth rank <= Q.

    Ranks are either aligned sequences or ``{query_id: rank}`` dicts.
    """
    if isinstance(ranks_a, dict) or isinstance(ranks_b, dict):
        if not (isinstance(ranks_a, dict) and isinstance(ranks_b, dict)) or set(ranks_a) != set(ranks_b):
            missing = set(ranks_a) ^ set(ranks_b) if isinstance(ranks_a, dict) and isinstance(ranks_b, dict) else "?"
            raise ValueError(f"rankers cover different query sets: {sorted(missing) if missing != '?' else missing}")
        keys = sorted(ranks_a)
        a = np.array([ranks_a[k] for k in keys])
        b = np.array([ranks_b[k] for k in keys])
    else:
        a, b = np.asarray(ranks_a), np.asarray(ranks_b)
        if a.shape != b.shape:
            raise ValueError(f"rankers cover different query sets ({a.shape} vs {b.shape})")
    sa, sb = a <= Q, b <= Q
    n = len(a)
    counts = {
        "both": int(np.count_nonzero(sa & sb)),
        "a_only": int(np.count_nonzero(sa & ~sb)),
        "b_only": int(np.count_nonzero(~sa & sb)),
        "neither": int(np.count_nonzero(~sa & ~sb)),
    }
    counts["n"] = n
    for k in ("both", "a_only", "b_only", "neither"):
        counts[f"{k}_pct"] = 100.0 * counts[k] / n if n else 0.0
    return counts


def teacher_ranks(dataset) -> np.ndarray:
    """Ground-truth ranks of a zero-shot ranker: teacher embedding vs raw frame features.

    Only meaningful when teacher and frame features share a space (same dimension).
    """
    d_t = dataset.queries[0].teacher_eos.shape[0]
    if d_t != dataset.d_v:
        raise ValueError(f"teacher dimension {d_t} differs from frame dimension {dataset.d_v}")
    frames = [_unit(v.frames) for v in dataset.videos]
    off = np.concatenate([[0], np.cumsum([len(f) for f in frames])]).astype(np.int64)
    index = RetrievalIndex([v.video_id for v in dataset.videos], np.concatenate(frames).astype(np.float32), off,
                           np.concatenate(frames).astype(np.float32), off.copy(), 1.0, 0.0)
    q = _unit(np.stack([qq.teacher_eos for qq in dataset.queries])).astype(np.float32)
    return gt_ranks(score_all(q, index), index, [qq.video_id for qq in dataset.queries])


def peak_rss_mb() -> float:
    # ru_maxrss is reported in KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def bench(index: RetrievalIndex, queries, db_sizes, runs: int = 5) -> list:
    """Mean per-query latency (ms) and peak resident memory per database size.

    Each size uses the first ``size`` videos of the index; every query is
    scored and ranked on its own, and the whole pass is repeated ``runs`` times.
    """
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)
    rows = []
    for size in db_sizes:
        if size <= 0:
            raise ValueError("database size must be positive")
        if size > len(index):
            raise ValueError(f"database size {size} exceeds the index ({len(index)} videos)")
        sub = index.subset(size)
        per_run = []
        for _ in range(runs):
            t0 = time.perf_counter()
            for q in queries:
                s = score_all(q[None, :], sub)[0]
                _order(s, sub.video_ids)
            per_run.append((time.perf_counter() - t0) * 1000.0 / len(queries))
        rows.append({"size": int(size), "time_ms": float(np.mean(per_run)), "memory_mb": peak_rss_mb(),
                     "runs": runs})
    return rows
