"""Trainable heads mapping raw features into the joint embedding space.

Three branches share one structure: a linear projection, learned position
embeddings and pre-norm transformer blocks. The text branch adds attention
pooling; the clip branch biases every attention logit by ``log(size)`` of the
key token so merged clips weigh in proportion to the frames they absorbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import SplitMix64

PAD_BIAS = -1e9
BRANCHES = ("text", "frame", "clip")


@dataclass(frozen=True)
class EncoderConfig:
    d_q: int
    d_v: int
    d: int = 64
    n_layers: int = 1
    n_heads: int = 1
    mlp_ratio: int = 2
    max_text_len: int = 32
    max_frames: int = 128
    max_clips: int = 32

    def in_dim(self, branch: str) -> int:
        return self.d_q if branch == "text" else self.d_v

    def max_len(self, branch: str) -> int:
        return {"text": self.max_text_len, "frame": self.max_frames, "clip": self.max_clips}[branch]


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def values(self) -> list:
        return list(self.tensors.values())

    def names(self) -> list:
        return list(self.tensors)

    def state(self) -> dict:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                           for k, v in self.tensors.items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                                           for k, v in self.tensors.items()})

    @classmethod
    def from_state(cls, config: EncoderConfig, state: dict, requires_grad=True) -> "EncoderParams":
        ref = init_encoder(config, seed=0)
        missing = set(ref.tensors) - set(state)
        extra = set(state) - set(ref.tensors)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        out = {}
        for k, t in ref.tensors.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: expected shape {t.shape}, got {arr.shape}")
            out[k] = Tensor(arr.copy(), requires_grad=requires_grad, name=k)
        return cls(config, out)


def init_encoder(config: EncoderConfig, seed: int = 0) -> EncoderParams:
    rng = SplitMix64(seed).spawn(0xE1C)
    d, hidden = config.d, config.d * config.mlp_ratio
    if d % config.n_heads:
        raise ValueError(f"d={d} is not divisible by n_heads={config.n_heads}")
    tensors = {}

    def add(name, arr):
        tensors[name] = Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)

    def dense(fan_in, fan_out):
        return rng.normal((fan_in, fan_out), scale=1.0 / math.sqrt(fan_in))

    for br in BRANCHES:
        add(f"{br}.proj.w", dense(config.in_dim(br), d))
        add(f"{br}.proj.b", np.zeros(d))
        # zero start: an untrained encoder treats every position alike
        add(f"{br}.pos", np.zeros((config.max_len(br), d)))
        for i in range(config.n_layers):
            p = f"{br}.blocks.{i}"
            for ln in ("ln1", "ln2"):
                add(f"{p}.{ln}.g", np.ones(d))
                add(f"{p}.{ln}.b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                add(f"{p}.attn.{w}", dense(d, d))
            add(f"{p}.mlp.w1", dense(d, hidden))
            add(f"{p}.mlp.b1", np.zeros(hidden))
            add(f"{p}.mlp.w2", dense(hidden, d))
            add(f"{p}.mlp.b2", np.zeros(d))
    add("text.pool", rng.normal((d,), scale=1.0 / math.sqrt(d)))
    return EncoderParams(config, tensors)


# -- building blocks ----------------------------------------------------------

def key_bias(lengths, L: int, sizes=None) -> np.ndarray:
    """Additive logit bias ``[B, 1, L]``: padding mask plus optional ``log(size)``."""
    lengths = np.asarray(lengths)
    bias = np.where(np.arange(L)[None, :] < lengths[:, None], 0.0, PAD_BIAS)
    if sizes is not None:
        sizes = np.asarray(sizes, dtype=np.float64)
        valid = bias == 0.0
        if np.any(sizes[valid] < 1):
            raise ValueError("clip sizes must be >= 1")
        bias = bias + np.log(np.where(valid, sizes, 1.0))
    return bias[:, None, :]


def attention_probs(x: Tensor, p: EncoderParams, prefix: str, bias=None) -> Tensor:
    """Single-head attention weights of block ``prefix`` (``[B, L, L]``)."""
    q = x @ p[f"{prefix}.attn.wq"]
    k = x @ p[f"{prefix}.attn.wk"]
    scores = (q @ k.T) * (1.0 / math.sqrt(q.shape[-1]))
    return ag.softmax(scores, axis=-1, bias=bias)


def self_attention(x: Tensor, p: EncoderParams, prefix: str, bias=None) -> Tensor:
    B, L, d = x.shape
    h = p.config.n_heads
    q = x @ p[f"{prefix}.attn.wq"]
    k = x @ p[f"{prefix}.attn.wk"]
    v = x @ p[f"{prefix}.attn.wv"]
    if h > 1:
        split = lambda t: t.reshape(B, L, h, d // h).transpose(0, 2, 1, 3)
        q, k, v = split(q), split(k), split(v)
        if bias is not None:
            bias = bias[:, None]
    scores = (q @ k.T) * (1.0 / math.sqrt(d // h))
    out = ag.softmax(scores, axis=-1, bias=bias) @ v
    if h > 1:
        out = out.transpose(0, 2, 1, 3).reshape(B, L, d)
    return out @ p[f"{prefix}.attn.wo"]


def block(x: Tensor, p: EncoderParams, prefix: str, bias=None) -> Tensor:
    h = ag.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = x + self_attention(h, p, prefix, bias)
    h = ag.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = ag.gelu(h @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"])
    return x + (h @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"])


def _branch(x, p: EncoderParams, br: str, bias) -> Tensor:
    x = ag.as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"{br} input must be [B, L, dim], got {x.shape}")
    B, L, dim = x.shape
    want = p.config.in_dim(br)
    if dim != want:
        raise ValueError(f"{br} feature dim {dim} does not match encoder input dim {want}")
    if L > p.config.max_len(br):
        raise ValueError(f"{br} sequence length {L} exceeds max {p.config.max_len(br)}")
    h = x @ p[f"{br}.proj.w"] + p[f"{br}.proj.b"]
    h = h + p[f"{br}.pos"][:L]
    for i in range(p.config.n_layers):
        h = block(h, p, f"{br}.blocks.{i}", bias)
    return h


def _lengths(x, lengths):
    return np.full(np.shape(x)[0], np.shape(x)[1]) if lengths is None else np.asarray(lengths)


# -- public encoders ----------------------------------------------------------

def attention_pool(seq, query, bias=None) -> Tensor:
    """softmax(seq . query / sqrt(d))-weighted sum of the rows of ``seq``.

    Works on ``[L, d]`` or batched ``[B, L, d]`` sequences; ``bias`` is an
    additive logit bias broadcastable to ``[..., L]``.
    """
    seq, query = ag.as_tensor(seq), ag.as_tensor(query)
    d = seq.shape[-1]
    logits = (seq @ query.reshape(d, 1)) * (1.0 / math.sqrt(d))  # [..., L, 1]
    w = ag.softmax(logits, axis=-2, bias=None if bias is None else np.asarray(bias)[..., None])
    return (w * seq).sum(axis=-2)


def encode_text(words, params: EncoderParams, lengths=None):
    """Returns ``(T_hat [B, L_q, d], T_bar [B, d])``."""
    if np.shape(words)[1] < 2:
        raise ValueError("queries need at least 2 word rows")
    lengths = _lengths(words, lengths)
    bias = key_bias(lengths, np.shape(words)[1])
    t_seq = _branch(words, params, "text", bias)
    t_pooled = attention_pool(t_seq, params["text.pool"], bias=bias[:, 0, :])
    return t_seq, t_pooled


def encode_frames(frames, params: EncoderParams, lengths=None) -> Tensor:
    lengths = _lengths(frames, lengths)
    return _branch(frames, params, "frame", key_bias(lengths, np.shape(frames)[1]))


def encode_clips(clips, sizes, params: EncoderParams, lengths=None) -> Tensor:
    """Clip branch with proportional attention (``log(size)`` key bias)."""
    sizes = np.asarray(sizes)
    if sizes.shape != np.shape(clips)[:2]:
        raise ValueError(f"sizes shape {sizes.shape} does not match clips {np.shape(clips)[:2]}")
    lengths = _lengths(clips, lengths)
    return _branch(clips, params, "clip", key_bias(lengths, np.shape(clips)[1], sizes))


@dataclass
class EncodedBatch:
    t_seq: Tensor
    t_pooled: Tensor
    v_frame: Tensor
    v_clip: Tensor
    clip_sizes: np.ndarray
