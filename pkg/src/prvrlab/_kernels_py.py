"""numpy implementations of the hot kernels (fallback for ``_kernels_c``)."""

import numpy as np


def _row_cos(a, b):
    num = np.einsum("ij,ij->i", a, b)
    den = np.sqrt(np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b))
    out = np.full(num.shape, -2.0)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def optome_merge(frames, levels):
    """Run OP-ToMe rounds following the precomputed length ``levels``.

    Returns ``(tokens, sizes, starts)``; token ``i`` covers frames
    ``starts[i] .. starts[i] + sizes[i] - 1``.
    """
    tokens = np.array(frames, dtype=np.float64, copy=True)
    sizes = np.ones(len(tokens), dtype=np.int64)
    starts = np.arange(len(tokens), dtype=np.int64)
    for nxt in levels[1:]:
        n = len(tokens)
        m = n - int(nxt)
        npairs = n // 2
        if m > npairs:
            raise ValueError(f"cannot remove {m} tokens from {n} with adjacent pairs")
        left = np.arange(0, 2 * npairs, 2)
        scores = _row_cos(tokens[left], tokens[left + 1])
        chosen = np.argsort(-scores, kind="stable")[:m]
        merge = np.zeros(npairs, dtype=bool)
        merge[chosen] = True

        li = left[merge]
        sa = sizes[li][:, None].astype(np.float64)
        sb = sizes[li + 1][:, None].astype(np.float64)
        tokens[li] = (sa * tokens[li] + sb * tokens[li + 1]) / (sa + sb)
        sizes[li] += sizes[li + 1]
        keep = np.ones(n, dtype=bool)
        keep[li + 1] = False
        tokens, sizes, starts = tokens[keep], sizes[keep], starts[keep]
    return tokens, sizes, starts


def pair_match(tokens):
    """Each even-position token proposes its most similar odd-position token.

    Returns ``(dst, sim)`` indexed by A-set position; ``dst`` indexes the B set.
    """
    a = tokens[0::2]
    b = tokens[1::2]
    na = np.sqrt((a * a).sum(1))
    nb = np.sqrt((b * b).sum(1))
    den = np.outer(na, nb)
    s = np.where(den > 0, (a @ b.T) / np.where(den > 0, den, 1.0), -2.0)
    dst = np.argmax(s, axis=1).astype(np.int64)
    return dst, s[np.arange(len(a)), dst]


def segment_max(queries, tokens, offsets):
    """``out[q, v] = max_{t in segment v} <queries[q], tokens[t]>``."""
    s = queries @ tokens.T
    return np.maximum.reduceat(s, offsets[:-1], axis=1)


def count_above(sim, tau):
    """Number of pairs ``i < j`` with ``sim[i, j] > tau``."""
    iu = np.triu_indices(sim.shape[0], k=1)
    return int(np.count_nonzero(sim[iu] > tau))
