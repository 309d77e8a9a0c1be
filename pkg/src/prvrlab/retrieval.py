"""Retrieval index, late-fusion scoring, ranking and recall metrics."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import encoders, kernels
from .data import load_checkpoint, save_checkpoint
from .merging import MergeConfig, op_tome

DEFAULT_QS = (1, 5, 10, 100)


@dataclass
class VideoEntry:
    video_id: str
    frames: np.ndarray
    clips: np.ndarray


@dataclass
class RetrievalIndex:
    """Unit-normalized float32 token matrices, concatenated over videos."""

    video_ids: list
    frame_tokens: np.ndarray
    frame_offsets: np.ndarray
    clip_tokens: np.ndarray
    clip_offsets: np.ndarray
    w_frame: float = 0.6
    w_clip: float = 0.4

    def __post_init__(self):
        if self.w_frame < 0 or self.w_clip < 0 or abs(self.w_frame + self.w_clip - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must be >= 0 and sum to 1, got ({self.w_frame}, {self.w_clip})")

    def __len__(self):
        return len(self.video_ids)

    def entry(self, i: int) -> VideoEntry:
        f0, f1 = self.frame_offsets[i], self.frame_offsets[i + 1]
        c0, c1 = self.clip_offsets[i], self.clip_offsets[i + 1]
        return VideoEntry(self.video_ids[i], self.frame_tokens[f0:f1], self.clip_tokens[c0:c1])

    def subset(self, n: int) -> "RetrievalIndex":
        """The first ``n`` videos."""
        if not 1 <= n <= len(self):
            raise ValueError(f"subset size {n} outside [1, {len(self)}]")
        return RetrievalIndex(self.video_ids[:n], self.frame_tokens[:self.frame_offsets[n]],
                              self.frame_offsets[:n + 1].copy(), self.clip_tokens[:self.clip_offsets[n]],
                              self.clip_offsets[:n + 1].copy(), self.w_frame, self.w_clip)

    def with_weights(self, w_frame: float, w_clip: float) -> "RetrievalIndex":
        return RetrievalIndex(self.video_ids, self.frame_tokens, self.frame_offsets, self.clip_tokens,
                              self.clip_offsets, w_frame, w_clip)

    @property
    def nbytes(self) -> int:
        return self.frame_tokens.nbytes + self.clip_tokens.nbytes

    def save(self, path) -> None:
        ids = json.dumps(self.video_ids).encode("utf-8")
        save_checkpoint(path, {
            "video_ids": np.frombuffer(ids, dtype=np.uint8),
            "frame_tokens": self.frame_tokens,
            "frame_offsets": self.frame_offsets,
            "clip_tokens": self.clip_tokens,
            "clip_offsets": self.clip_offsets,
            "fusion": np.array([self.w_frame, self.w_clip], dtype=np.float64),
        })

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        s = load_checkpoint(path)
        ids = json.loads(s["video_ids"].tobytes().decode("utf-8"))
        return cls(ids, s["frame_tokens"], s["frame_offsets"], s["clip_tokens"], s["clip_offsets"],
                   float(s["fusion"][0]), float(s["fusion"][1]))


def _unit32(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ZeroDivisionError("zero-norm token in index")
    return (x / n).astype(np.float32)


def _pad(seqs, dtype=np.float64):
    L = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), L, seqs[0].shape[1]), dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, np.array([len(s) for s in seqs])


def encode_video_tokens(frames_list, clip_seqs, params, batch_size: int = 64):
    """Encoded frame and clip tokens per video (no gradient tracking)."""
    frames_out, clips_out = [], []
    with ag.no_grad():
        for s in range(0, len(frames_list), batch_size):
            fb, fl = _pad(frames_list[s:s + batch_size])
            vf = encoders.encode_frames(fb, params, fl).data
            seqs = clip_seqs[s:s + batch_size]
            cb, cl = _pad([c.tokens for c in seqs])
            sizes = np.ones(cb.shape[:2], dtype=np.int64)
            for i, c in enumerate(seqs):
                sizes[i, :len(c)] = c.sizes
            vc = encoders.encode_clips(cb, sizes, params, cl).data
            frames_out += [vf[i, :fl[i]] for i in range(len(fl))]
            clips_out += [vc[i, :cl[i]] for i in range(len(cl))]
    return frames_out, clips_out


def build_index(videos, params, merge: MergeConfig = MergeConfig(), w_frame: float = 0.6,
                w_clip: float = 0.4, clip_seqs=None) -> RetrievalIndex:
    """Merge raw frames into clips, encode both branches and store unit-norm tokens."""
    if not videos:
        raise ValueError("cannot build an index over an empty video set")
    if clip_seqs is None:
        clip_seqs = [op_tome(v.frames, merge.merge_rate, merge.clip_target) for v in videos]
    frames, clips = encode_video_tokens([np.asarray(v.frames, np.float64) for v in videos], clip_seqs, params)
    f_off = np.concatenate([[0], np.cumsum([len(f) for f in frames])]).astype(np.int64)
    c_off = np.concatenate([[0], np.cumsum([len(c) for c in clips])]).astype(np.int64)
    return RetrievalIndex([v.video_id for v in videos], _unit32(np.concatenate(frames)), f_off,
                          _unit32(np.concatenate(clips)), c_off, w_frame, w_clip)


def encode_queries(queries, params, batch_size: int = 256) -> np.ndarray:
    """Pooled, unit-normalized query embeddings ``[n, d]`` (float32)."""
    out = []
    with ag.no_grad():
        for s in range(0, len(queries), batch_size):
            wb, wl = _pad([np.asarray(q.words, np.float64) for q in queries[s:s + batch_size]])
            _, pooled = encoders.encode_text(wb, params, wl)
            out.append(pooled.data)
    return _unit32(np.concatenate(out))


def score(query, entry: VideoEntry, w_frame: float = 0.6, w_clip: float = 0.4) -> float:
    """``w_f * max cos(query, frame) + w_c * max cos(query, clip)`` on unit-norm inputs."""
    q = np.asarray(query, dtype=np.float64)
    return float(w_frame * np.max(entry.frames @ q) + w_clip * np.max(entry.clips @ q))


def score_all(queries, index: RetrievalIndex) -> np.ndarray:
    """Fused scores ``[n_queries, n_videos]``."""
    q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)
    sf = kernels.segment_max(q, index.frame_tokens, index.frame_offsets)
    sc = kernels.segment_max(q, index.clip_tokens, index.clip_offsets)
    return index.w_frame * sf.astype(np.float64) + index.w_clip * sc.astype(np.float64)


@dataclass
class Ranking:
    query_id: str
    video_ids: list
    scores: np.ndarray


def _order(scores: np.ndarray, video_ids) -> np.ndarray:
    id_key = np.argsort(np.argsort(np.asarray(video_ids)))
    return np.lexsort((id_key, -scores))


def rank(query, index: RetrievalIndex, query_id: str = "") -> Ranking:
    s = score_all(query, index)[0]
    order = _order(s, index.video_ids)
    return Ranking(query_id, [index.video_ids[i] for i in order], s[order])


def gt_ranks(scores: np.ndarray, index: RetrievalIndex, gt_video_ids) -> np.ndarray:
    """1-based rank of each query's ground-truth video, ties broken by video id."""
    pos = {v: i for i, v in enumerate(index.video_ids)}
    ids = np.asarray(index.video_ids)
    out = np.empty(len(gt_video_ids), dtype=np.int64)
    for qi, gv in enumerate(gt_video_ids):
        j = pos[gv]
        s = scores[qi]
        ahead = (s > s[j]) | ((s == s[j]) & (ids < gv))
        out[qi] = 1 + int(np.count_nonzero(ahead))
    return out


@dataclass
class RecallReport:
    recall: dict
    sum_r: float
    n_queries: int
    saturated: tuple = ()

    def rows(self) -> list:
        rows = [{"metric": f"R@{q}", "value": round(v, 4), "saturated": q in self.saturated}
                for q, v in self.recall.items()]
        rows.append({"metric": "SumR", "value": round(self.sum_r, 4), "saturated": False})
        return rows


def recall_from_ranks(ranks, Qs=DEFAULT_QS, n_videos: int | None = None) -> RecallReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no queries to evaluate")
    rec, sat = {}, []
    for q in Qs:
        if n_videos is not None and q > n_videos:
            rec[q] = 100.0
            sat.append(q)
        else:
            rec[q] = 100.0 * np.count_nonzero(ranks <= q) / len(ranks)
    return RecallReport(rec, float(sum(rec.values())), len(ranks), tuple(sat))


def recall_at(rankings, ground_truth: dict, Qs=DEFAULT_QS) -> RecallReport:
    """R@Q per Q (percent) and their sum, from full rankings and query -> video ground truth."""
    ranks = []
    n_videos = None
    for r in rankings:
        if r.query_id not in ground_truth:
            raise KeyError(f"no ground truth for query {r.query_id!r}")
        gt = ground_truth[r.query_id]
        try:
            ranks.append(r.video_ids.index(gt) + 1)
        except ValueError:
            raise KeyError(f"ground-truth video {gt!r} of query {r.query_id!r} is not in the ranking") from None
        n_videos = len(r.video_ids)
    return recall_from_ranks(ranks, Qs, n_videos)


def evaluate(params, dataset, merge: MergeConfig = MergeConfig(), w_frame=0.6, w_clip=0.4, Qs=DEFAULT_QS,
             index: RetrievalIndex | None = None, clip_seqs=None):
    """Index ``dataset.videos``, rank every query, return ``(report, gt_ranks, index)``."""
    index = index or build_index(dataset.videos, params, merge, w_frame, w_clip, clip_seqs)
    q = encode_queries(dataset.queries, params)
    s = score_all(q, index)
    ranks = gt_ranks(s, index, [qq.video_id for qq in dataset.queries])
    return recall_from_ranks(ranks, Qs, len(index)), ranks, index


def queries_by_video(dataset) -> dict:
    out = defaultdict(list)
    for i, q in enumerate(dataset.queries):
        out[q.video_id].append(i)
    return out
