"""Token merging: clip-count schedules, order-preserving merging, bipartite merging.

Frame and clip indices are 0-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels


@dataclass
class SizedTokenSeq:
    """Tokens with per-token sizes and the original indices each one absorbed."""

    tokens: np.ndarray
    sizes: np.ndarray
    provenance: list

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_frames(cls, frames) -> "SizedTokenSeq":
        frames = np.asarray(frames, dtype=np.float64)
        n = len(frames)
        return cls(frames.copy(), np.ones(n, dtype=np.int64), [np.array([i]) for i in range(n)])

    @property
    def n_frames(self) -> int:
        return int(self.sizes.sum())

    def spans(self) -> list:
        """``(start, stop)`` per token; raises if a provenance set is not contiguous."""
        out = []
        for p in self.provenance:
            lo, hi = int(p.min()), int(p.max()) + 1
            if hi - lo != len(p):
                raise ValueError(f"provenance {p.tolist()} is not a contiguous span")
            out.append((lo, hi))
        return out

    def frame_to_token(self) -> np.ndarray:
        owner = np.full(self.n_frames, -1, dtype=np.int64)
        for i, p in enumerate(self.provenance):
            owner[p] = i
        return owner

    def check(self) -> None:
        n = self.n_frames
        allp = np.concatenate(self.provenance) if self.provenance else np.zeros(0, dtype=np.int64)
        assert len(self.tokens) == len(self.sizes) == len(self.provenance), "length mismatch"
        assert np.all(self.sizes >= 1), "non-positive size"
        assert all(len(p) == s for p, s in zip(self.provenance, self.sizes)), "size != |provenance|"
        assert len(allp) == n and np.array_equal(np.sort(allp), np.arange(n)), "provenance is not a partition"


@dataclass(frozen=True)
class ClipSchedule:
    levels: tuple
    merge_rate: float
    c_min: int

    @property
    def K(self) -> int:
        return len(self.levels)

    def merges(self) -> list:
        """Tokens removed per round, ``L^i - L^{i+1}``."""
        return [a - b for a, b in zip(self.levels, self.levels[1:])]


def _rate(N) -> Fraction:
    return Fraction(str(N)) if isinstance(N, float) else Fraction(N)


def next_level(L: int, N, c_min: int) -> int:
    """One step of the clip-count recurrence, in exact rational arithmetic."""
    val = (Fraction(L) - Fraction(L, 2) * _rate(N) / 100 + 1) / 2
    return max(2 * math.floor(val), c_min)


def clip_schedule(L: int, N=75, c_min: int = 5) -> ClipSchedule:
    if not (0 < _rate(N) <= 100):
        raise ValueError(f"merge rate must be in (0, 100], got {N}")
    if c_min < 1:
        raise ValueError(f"c_min must be >= 1, got {c_min}")
    if L < c_min:
        raise ValueError(f"initial count {L} is below the minimum {c_min}")
    levels = [int(L)]
    while levels[-1] > c_min:
        nxt = next_level(levels[-1], N, c_min)
        if nxt == levels[-1]:
            break
        levels.append(nxt)
    return ClipSchedule(tuple(levels), N, c_min)


def op_tome(frames, N=75, target: int = 32) -> SizedTokenSeq:
    """Order-preserving merging of adjacent frame pairs down to ``target`` tokens.

    Each round pairs (0,1), (2,3), ... and merges the highest-scoring pairs;
    the per-round merge counts come from ``clip_schedule(L_f, N, target)``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError(f"frames must be [L_f, d], got {frames.shape}")
    L = len(frames)
    if target > L:
        raise ValueError(f"target {target} exceeds frame count {L}")
    sched = clip_schedule(L, N, target)
    if sched.levels[-1] > target:
        raise ValueError(f"merge rate {N} stalls at {sched.levels[-1]} tokens above target {target}")
    tokens, sizes, starts = kernels.optome_merge(frames, np.asarray(sched.levels, dtype=np.int64))
    prov = [np.arange(s, s + z) for s, z in zip(starts.tolist(), sizes.tolist())]
    return SizedTokenSeq(tokens, sizes, prov)


def op_tome_lengths(L: int, N=75, target: int = 32) -> list:
    return list(clip_schedule(L, N, target).levels)


def cosine_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1)
    if np.any(n == 0):
        raise ZeroDivisionError("zero-norm token")
    u = x / n[:, None]
    return u @ u.T


def high_sim_ratio(raw_clips, tau: float) -> float:
    """Fraction of clip pairs whose cosine similarity exceeds ``tau``."""
    raw_clips = np.asarray(raw_clips, dtype=np.float64)
    L = len(raw_clips)
    if L < 2:
        raise ValueError("high_sim_ratio needs at least 2 clips")
    return kernels.count_above(cosine_matrix(raw_clips), float(tau)) / (L * (L - 1) / 2)


def select_merge_depth(omega: float, K: int, mode: str = "literal") -> int:
    """Merge depth k* in [1, K].

    ``literal`` keeps all clips unless omega > 1 - 1/K, and otherwise picks the
    smallest k >= 2 with omega > (K - k)/K, which is always 2. ``monotone``
    returns min(K, floor(omega*K) + 1).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {omega}")
    if mode == "literal":
        if K == 1 or omega <= 1.0 - 1.0 / K:
            return 1
        for k in range(2, K + 1):
            if omega > (K - k) / K:
                return k
        return K
    if mode == "monotone":
        return min(K, math.floor(omega * K) + 1)
    raise ValueError(f"unknown mode {mode!r} (expected 'literal' or 'monotone')")


def bipartite_merge(seq: SizedTokenSeq, r: int) -> SizedTokenSeq:
    """Merge ``r`` tokens of the even-position set into their best odd-position match.

    Survivors keep their original relative order; merged tokens take the
    position of their destination.
    """
    n = len(seq)
    if r >= n or r < 0:
        raise ValueError(f"merge count {r} must be in [0, {n})")
    if r == 0:
        return SizedTokenSeq(seq.tokens.copy(), seq.sizes.copy(), [p.copy() for p in seq.provenance])
    n_a = (n + 1) // 2
    if r > n_a:
        raise ValueError(f"merge count {r} exceeds the {n_a} source tokens")
    dst, sim = kernels.pair_match(seq.tokens)
    chosen = np.argsort(-sim, kind="stable")[:r]
    tokens = seq.tokens.copy()
    sizes = seq.sizes.astype(np.int64).copy()
    prov = [p.copy() for p in seq.provenance]
    alive = np.ones(n, dtype=bool)
    # several sources may share a destination; merging them one at a time with
    # running sizes gives the same size-weighted mean as merging all at once
    for a in sorted(chosen.tolist()):
        src, tgt = 2 * a, 2 * int(dst[a]) + 1
        ss, st = sizes[src], sizes[tgt]
        tokens[tgt] = (ss * tokens[src] + st * tokens[tgt]) / (ss + st)
        sizes[tgt] = ss + st
        prov[tgt] = np.sort(np.concatenate([prov[tgt], prov[src]]))
        alive[src] = False
    keep = np.flatnonzero(alive)
    return SizedTokenSeq(tokens[keep], sizes[keep], [prov[i] for i in keep])


@dataclass
class AdaptiveClipResult:
    clips: SizedTokenSeq
    omega: float
    depth: int
    frame_to_clip: np.ndarray
    frame_sets: list
    clip_groups: list = field(default_factory=list)
    clip_sizes: np.ndarray | None = None

    @property
    def n_clips(self) -> int:
        return len(self.clips)

    @property
    def set_sizes(self) -> np.ndarray:
        return np.array([len(f) for f in self.frame_sets], dtype=np.int64)

    def merge_matrix(self) -> np.ndarray:
        """Size-weighted averaging matrix mapping the original clips to merged clips."""
        L = len(self.clip_sizes)
        W = np.zeros((len(self.clip_groups), L))
        for i, g in enumerate(self.clip_groups):
            w = self.clip_sizes[g].astype(np.float64)
            W[i, g] = w / w.sum()
        return W


def adaptive_clips(encoded_clips: SizedTokenSeq, raw_clips, schedule: ClipSchedule,
                   tau: float, mode: str = "literal") -> AdaptiveClipResult:
    """Pick a merge depth from the raw clips' similarity and merge the encoded clips.

    ``encoded_clips`` carries the order-preserving provenance over frames.
    """
    L = len(encoded_clips)
    raw_clips = np.asarray(raw_clips)
    if L != schedule.levels[0] or len(raw_clips) != L:
        raise ValueError(f"expected {schedule.levels[0]} clips, got {L} encoded / {len(raw_clips)} raw")
    omega = high_sim_ratio(raw_clips, tau)
    depth = select_merge_depth(omega, schedule.K, mode)

    # merge in clip-index space, then lift the groups to frames
    seq = SizedTokenSeq(np.asarray(encoded_clips.tokens, dtype=np.float64), encoded_clips.sizes.copy(),
                        [np.array([i]) for i in range(L)])
    for r in schedule.merges()[:depth - 1]:
        seq = bipartite_merge(seq, r)
    groups = seq.provenance
    frame_prov = [np.sort(np.concatenate([encoded_clips.provenance[c] for c in g])) for g in groups]
    clips = SizedTokenSeq(seq.tokens, seq.sizes, frame_prov)
    clips.check()
    delta = clips.frame_to_token()
    assert np.all(delta >= 0), "frame without a clip"
    return AdaptiveClipResult(
        clips=clips,
        omega=omega,
        depth=depth,
        frame_to_clip=delta,
        frame_sets=frame_prov,
        clip_groups=[g.copy() for g in groups],
        clip_sizes=encoded_clips.sizes.copy(),
    )


@dataclass(frozen=True)
class MergeConfig:
    merge_rate: float = 75
    clip_target: int = 32
    c_min: int = 5
    tau: float = 0.7
    mode: str = "literal"

    def validate(self) -> "MergeConfig":
        if self.mode not in ("literal", "monotone"):
            raise ValueError(f"unknown adaptive mode {self.mode!r}")
        if not 0 < self.merge_rate <= 100:
            raise ValueError("merge_rate must be in (0, 100]")
        if not 1 <= self.c_min <= self.clip_target:
            raise ValueError("need 1 <= c_min <= clip_target")
        return self

    def schedule(self) -> ClipSchedule:
        return clip_schedule(self.clip_target, self.merge_rate, self.c_min)
