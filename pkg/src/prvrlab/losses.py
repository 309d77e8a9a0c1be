"""Training objectives: retrieval base loss, relational text distillation, cross-branch alignment."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .merging import AdaptiveClipResult
from .rng import SplitMix64

log = logging.getLogger(__name__)

_MASK_LOW = -4.0  # below any cosine


@dataclass(frozen=True)
class LossWeights:
    lambda_e: float = 15.0
    lambda_a: float = 30.0
    lambda_cbva: float = 0.1
    nce_temperature: float = 0.07
    triplet_margin: float = 0.2
    huber_delta: float = 1.0
    triple_budget: int = 8000

    def validate(self) -> "LossWeights":
        for k in ("lambda_e", "lambda_a", "lambda_cbva", "triplet_margin"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.nce_temperature <= 0:
            raise ValueError("nce_temperature must be > 0")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")
        if self.triple_budget < 1:
            raise ValueError("triple_budget must be >= 1")
        return self


@dataclass
class LossBreakdown:
    nce_clip: Tensor
    trip_clip: Tensor
    nce_frame: Tensor
    trip_frame: Tensor
    tcpl_e: Tensor
    tcpl_a: Tensor
    cbva: Tensor
    total: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def base(self) -> float:
        return float(self.nce_clip.data + self.trip_clip.data + self.nce_frame.data + self.trip_frame.data)

    def row(self) -> dict:
        return {"base": self.base, "tcpl_e": float(self.tcpl_e.data), "tcpl_a": float(self.tcpl_a.data),
                "cbva": float(self.cbva.data), "total": float(self.total.data)}


def _zero(dtype=np.float64) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


# -- relational distances ------------------------------------------------------

def pair_dist_e(x, y, mu: float) -> float:
    """Euclidean distance scaled by the batch mean distance ``mu`` (0 when ``mu`` is 0)."""
    if mu == 0:
        warnings.warn("mean batch distance is zero; relational distances degenerate to 0", RuntimeWarning)
        return 0.0
    return float(np.linalg.norm(np.asarray(x, float) - np.asarray(y, float)) / mu)


def triplet_angle_a(x, y, z):
    """Cosine of the angle at ``y`` between ``x - y`` and ``z - y``; None when undefined."""
    u = np.asarray(x, float) - np.asarray(y, float)
    v = np.asarray(z, float) - np.asarray(y, float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return None
    return float(u @ v / (nu * nv))


def _pairwise_np(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(-1)), diff


def _pairwise(x: Tensor):
    """Distances ``[B, B]`` and difference vectors ``D[a, b] = x_a - x_b``."""
    B, d = x.shape
    diff = x.reshape(B, 1, d) - x.reshape(1, B, d)
    eye = np.eye(B)
    dist = ag.sqrt((diff * diff).sum(axis=-1) + eye) * (1.0 - eye)
    return dist, diff


def _sample_triples(B: int, budget: int, seed: int):
    if B ** 3 <= budget:
        return None
    rng = SplitMix64(seed).spawn(B)
    return rng.integers(0, B, size=(3, budget))


def tcpl_loss(teacher, student: Tensor, weights: LossWeights = LossWeights(), seed: int = 0):
    """Relational distillation ``(L_E, L_A)`` from teacher embeddings to student embeddings.

    ``L_E`` compares mean-normalized pairwise distances; ``L_A`` compares the
    cosine of the angle at ``j`` for every triple ``(i, j, k)``. Triples with a
    repeated point are skipped but the normalizer stays ``B**3``. Above
    ``weights.triple_budget`` triples, ``L_A`` is estimated on a seeded uniform
    sample.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    student = ag.as_tensor(student)
    B = teacher.shape[0]
    if B < 2:
        raise ValueError("tcpl_loss needs at least 2 queries")
    if student.shape[0] != B:
        raise ValueError(f"teacher has {B} rows, student has {student.shape[0]}")
    offdiag = 1.0 - np.eye(B)
    npairs = B * (B - 1)
    delta = weights.huber_delta

    t_dist, t_diff = _pairwise_np(teacher)
    t_mu = t_dist.sum() / npairs
    if t_mu > 0:
        t_fe = t_dist / t_mu
    else:
        warnings.warn("teacher embeddings coincide; teacher distances set to 0", RuntimeWarning)
        t_fe = np.zeros_like(t_dist)

    s_dist, s_diff = _pairwise(student)
    s_mu = s_dist.sum() * (1.0 / npairs)
    if float(s_mu.data) > 0:
        s_fe = s_dist / s_mu
    else:
        warnings.warn("student embeddings coincide; student distances set to 0", RuntimeWarning)
        s_fe = s_dist * 0.0
    l_e = (ag.huber(t_fe, s_fe, delta) * offdiag).sum() * (1.0 / npairs)

    # unit difference vectors, U[j, i] ~ x_j - x_i (the sign cancels in the angle)
    t_ok = t_dist > 1e-12
    t_unit = np.where(t_ok[..., None], t_diff / np.where(t_ok, t_dist, 1.0)[..., None], 0.0)
    s_ok = s_dist.data > 1e-12
    ok = t_ok & s_ok
    s_unit = s_diff / (s_dist + (1.0 - offdiag)).reshape(B, B, 1)

    triples = _sample_triples(B, weights.triple_budget, seed)
    if triples is None:
        t_ang = np.einsum("jid,jkd->jik", t_unit, t_unit)
        s_ang = s_unit @ s_unit.T
        valid = ok[:, :, None] & ok[:, None, :]
        l_a = (ag.huber(t_ang, s_ang, delta) * valid).sum() * (1.0 / B ** 3)
    else:
        i, j, k = triples
        t_ang = np.einsum("nd,nd->n", t_unit[j, i], t_unit[j, k])
        s_ang = (s_unit[j, i] * s_unit[j, k]).sum(axis=-1)
        valid = ok[j, i] & ok[j, k]
        l_a = (ag.huber(t_ang, s_ang, delta) * valid).mean()
    return l_e, l_a


# -- retrieval base loss -----------------------------------------------------------

def video_scores(t_pooled: Tensor, tokens: Tensor, token_mask=None) -> Tensor:
    """``s[q, v] = max_t cos(T_q, tokens[v, t])``, shape ``[B_q, B_v]``."""
    Bv, L, d = tokens.shape
    tq = ag.normalize(t_pooled)
    tv = ag.normalize(tokens).reshape(Bv * L, d)
    sims = (tq @ tv.T).reshape(tq.shape[0], Bv, L)
    if token_mask is not None:
        sims = sims + np.where(np.asarray(token_mask, bool), 0.0, _MASK_LOW)[None]
    return sims.max(axis=-1)


def infonce(scores: Tensor, pairing, temperature: float) -> Tensor:
    """Symmetric InfoNCE; a video's positives are all its queries in the batch."""
    pairing = np.asarray(pairing)
    Bq, Bv = scores.shape
    pos = np.zeros((Bq, Bv), dtype=bool)
    pos[np.arange(Bq), pairing] = True
    logits = scores * (1.0 / temperature)
    q2v = ag.logsumexp(logits, axis=1) - (logits * pos).sum(axis=1)
    v2q = ag.logsumexp(logits, axis=0) - ag.logsumexp(logits, axis=0, mask=pos)
    return (q2v.mean() + v2q.mean()) * 0.5


def triplet(scores: Tensor, pairing, margin: float) -> Tensor:
    """Hinge ranking loss with the hardest in-batch negative, query and video anchors."""
    pairing = np.asarray(pairing)
    Bq, Bv = scores.shape
    pos = np.zeros((Bq, Bv), dtype=bool)
    pos[np.arange(Bq), pairing] = True
    s_pos = (scores * pos).sum(axis=1)  # [Bq]
    # query anchors: hardest other video
    neg_v = (scores + np.where(pos, _MASK_LOW, 0.0)).max(axis=1)
    q_term = ag.relu(margin - s_pos + neg_v).mean()
    # video anchors: for each positive pair (q, v), the hardest query not paired with v
    has_neg = (~pos).any(axis=0)
    keep = has_neg[pairing]
    if not keep.any():
        return q_term * 0.5
    neg_q = (scores + np.where(pos, _MASK_LOW, 0.0)).max(axis=0)  # [Bv]
    neg_for_pair = neg_q[pairing]
    v_term = (ag.relu(margin - s_pos + neg_for_pair) * keep).sum() * (1.0 / keep.sum())
    return (q_term + v_term) * 0.5


def base_loss(t_pooled: Tensor, v_frame: Tensor, v_clip: Tensor, pairing, weights: LossWeights = LossWeights(),
              frame_mask=None, clip_mask=None) -> dict:
    """Four base sub-terms ``{nce_clip, trip_clip, nce_frame, trip_frame}``."""
    pairing = np.asarray(pairing)
    if pairing.shape != (t_pooled.shape[0],):
        raise ValueError("pairing must give one video index per query")
    if v_frame.shape[0] != v_clip.shape[0] or np.any(pairing < 0) or np.any(pairing >= v_frame.shape[0]):
        raise ValueError("every query needs its paired video in the batch")
    if v_frame.shape[0] < 2:
        warnings.warn("batch holds a single video; no negatives, base loss is 0", RuntimeWarning)
        z = _zero(t_pooled.dtype)
        return {"nce_clip": z, "trip_clip": z, "nce_frame": z, "trip_frame": z}
    out = {}
    for name, tokens, mask in (("clip", v_clip, clip_mask), ("frame", v_frame, frame_mask)):
        s = video_scores(t_pooled, tokens, mask)
        out[f"nce_{name}"] = infonce(s, pairing, weights.nce_temperature)
        out[f"trip_{name}"] = triplet(s, pairing, weights.triplet_margin)
    return out


# -- cross-branch alignment --------------------------------------------------------

def cbva_video(frames: Tensor, clips: Tensor, frame_to_clip) -> Tensor:
    """Frame-to-clip plus clip-to-frame NCE for one video (cosine logits)."""
    delta = np.asarray(frame_to_clip)
    Lf, Lc = frames.shape[0], clips.shape[0]
    if delta.shape != (Lf,):
        raise ValueError(f"frame_to_clip has shape {delta.shape}, expected ({Lf},)")
    assign = np.zeros((Lf, Lc), dtype=bool)
    assign[np.arange(Lf), delta] = True
    assert assign.any(axis=0).all(), "merged clip without frames"
    S = ag.cosine_matrix(frames, clips)  # [Lf, Lc]
    term1 = (ag.logsumexp(S, axis=1) - (S * assign).sum(axis=1)).mean()
    term2 = (ag.logsumexp(S, axis=0) - ag.logsumexp(S, axis=0, mask=assign)).mean()
    return term1 + term2


def cbva_loss(v_frame: Tensor, v_clip: Tensor, results, frame_lengths=None) -> Tensor:
    """Batch-averaged alignment loss.

    ``results[b]`` is the :class:`AdaptiveClipResult` of video ``b``; its merge
    matrix maps the encoded clips ``v_clip[b]`` onto the merged clips.
    """
    Bv = v_frame.shape[0]
    if len(results) != Bv:
        raise ValueError(f"{len(results)} merge results for {Bv} videos")
    terms = []
    for b, res in enumerate(results):
        Lf = v_frame.shape[1] if frame_lengths is None else int(frame_lengths[b])
        frames = v_frame[b, :Lf]
        L0 = len(res.clip_sizes)
        clips = v_clip[b, :L0]
        if res.n_clips != L0:
            clips = Tensor(res.merge_matrix()) @ clips
        terms.append(cbva_video(frames, clips, res.frame_to_clip))
    return ag.stack(terms).mean()


def cbva_from_result(frames: Tensor, res: AdaptiveClipResult, encoded_clips: Tensor) -> Tensor:
    clips = encoded_clips if res.n_clips == len(res.clip_sizes) else Tensor(res.merge_matrix()) @ encoded_clips
    return cbva_video(frames, clips, res.frame_to_clip)


def combine(base: dict, l_e: Tensor, l_a: Tensor, l_cbva: Tensor, weights: LossWeights) -> LossBreakdown:
    """``total = base + lambda_e L_E + lambda_a L_A + lambda_cbva L_CBVA``."""
    total = base["nce_clip"] + base["trip_clip"] + base["nce_frame"] + base["trip_frame"]
    if weights.lambda_e:
        total = total + l_e * weights.lambda_e
    if weights.lambda_a:
        total = total + l_a * weights.lambda_a
    if weights.lambda_cbva:
        total = total + l_cbva * weights.lambda_cbva
    return LossBreakdown(base["nce_clip"], base["trip_clip"], base["nce_frame"], base["trip_frame"],
                         l_e, l_a, l_cbva, total)


# -- total objective -------------------------------------------------------------

@dataclass
class TrainBatch:
    """One mini-batch: queries, their paired videos and precomputed clip merges."""

    words: np.ndarray          # [B_q, L_q, d_q]
    word_lengths: np.ndarray   # [B_q]
    teacher: np.ndarray        # [B_q, d_teacher]
    pairing: np.ndarray        # [B_q] -> video row
    frames: np.ndarray         # [B_v, L_f, d_v]
    frame_lengths: np.ndarray  # [B_v]
    clips: list                # [B_v] SizedTokenSeq from order-preserving merging (raw features)

    def clip_arrays(self):
        Bv = len(self.clips)
        Lc = max(len(c) for c in self.clips)
        dv = self.clips[0].tokens.shape[1]
        tokens = np.zeros((Bv, Lc, dv), dtype=self.frames.dtype)
        sizes = np.ones((Bv, Lc), dtype=np.int64)
        lengths = np.zeros(Bv, dtype=np.int64)
        for b, c in enumerate(self.clips):
            tokens[b, :len(c)] = c.tokens
            sizes[b, :len(c)] = c.sizes
            lengths[b] = len(c)
        return tokens, sizes, lengths


def _length_mask(lengths, L):
    return np.arange(L)[None, :] < np.asarray(lengths)[:, None]


def total_loss(batch: TrainBatch, params, weights: LossWeights = LossWeights(), merge=None,
               seed: int = 0) -> LossBreakdown:
    """Encode the batch and evaluate every objective term."""
    from . import encoders
    from .merging import MergeConfig, SizedTokenSeq, adaptive_clips

    merge = merge or MergeConfig()
    schedule = merge.schedule()
    _, t_pooled = encoders.encode_text(batch.words, params, batch.word_lengths)
    v_frame = encoders.encode_frames(batch.frames, params, batch.frame_lengths)
    clip_tokens, clip_sizes, clip_lengths = batch.clip_arrays()
    v_clip = encoders.encode_clips(clip_tokens, clip_sizes, params, clip_lengths)

    frame_mask = _length_mask(batch.frame_lengths, v_frame.shape[1])
    clip_mask = _length_mask(clip_lengths, v_clip.shape[1])
    base = base_loss(t_pooled, v_frame, v_clip, batch.pairing, weights, frame_mask, clip_mask)

    if len(batch.pairing) >= 2:
        l_e, l_a = tcpl_loss(batch.teacher, t_pooled, weights, seed=seed)
    else:
        l_e = l_a = _zero(t_pooled.dtype)

    results = []
    for b, seq in enumerate(batch.clips):
        enc = SizedTokenSeq(v_clip.data[b, :len(seq)], seq.sizes, seq.provenance)
        results.append(adaptive_clips(enc, seq.tokens, schedule, merge.tau, merge.mode))
    l_cbva = cbva_loss(v_frame, v_clip, results, batch.frame_lengths)

    out = combine(base, l_e, l_a, l_cbva, weights)
    out.extras = {"omega": [r.omega for r in results], "depth": [r.depth for r in results],
                  "t_pooled": t_pooled, "v_frame": v_frame, "v_clip": v_clip}
    return out
