import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from prvrlab import kernels
from prvrlab.merging import (MergeConfig, SizedTokenSeq, adaptive_clips, bipartite_merge, clip_schedule,
                             high_sim_ratio, op_tome, op_tome_lengths, select_merge_depth)

backends = [kernels.python] + ([kernels.compiled] if kernels.compiled is not None else [])


def _levels_by_hand(L, N, c):
    out = [L]
    while out[-1] > c:
        x = out[-1]
        # (x - x*N/200 + 1) / 2, floored, in integers
        nxt = max(2 * ((200 * x - x * N + 200) // 400), c)
        if nxt == x:
            break
        out.append(nxt)
    return out


@pytest.mark.parametrize("L,N,c,expected", [
    (32, 75, 5, [32, 20, 12, 8, 6, 5]),
    (5, 75, 5, [5]),
    (8, 75, 5, [8, 6, 5]),
    (128, 75, 32, [128, 80, 50, 32]),
])
def test_schedule_examples(L, N, c, expected):
    s = clip_schedule(L, N, c)
    assert list(s.levels) == expected
    assert s.K == len(expected)


@given(st.integers(1, 400), st.integers(1, 100), st.integers(1, 40))
def test_schedule_matches_integer_recurrence(L, N, c):
    assume(L >= c)
    assert list(clip_schedule(L, N, c).levels) == _levels_by_hand(L, N, c)


@given(st.integers(1, 400), st.integers(1, 100), st.integers(1, 40))
def test_schedule_strictly_decreasing_and_bounded(L, N, c):
    assume(L >= c)
    lv = clip_schedule(L, N, c).levels
    assert all(a > b for a, b in zip(lv, lv[1:]))
    assert lv[-1] >= c


def test_schedule_rejects_bad_input():
    with pytest.raises(ValueError):
        clip_schedule(4, 75, 5)
    with pytest.raises(ValueError):
        clip_schedule(32, 0, 5)


def test_op_tome_lengths_128():
    assert op_tome_lengths(128, 75, 32) == [128, 80, 50, 32]


def test_op_tome_identical_frames():
    v = np.array([0.3, -1.0, 2.0])
    seq = op_tome(np.tile(v, (128, 1)))
    assert len(seq) == 32 and seq.sizes.sum() == 128
    np.testing.assert_allclose(seq.tokens, np.tile(v, (32, 1)))


def test_op_tome_never_crosses_block_boundary():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 16))
    frames = np.vstack([np.tile(a, (64, 1)), np.tile(b, (64, 1))])
    seq = op_tome(frames)
    for s, e in seq.spans():
        assert e <= 64 or s >= 64


def test_op_tome_target_too_large():
    with pytest.raises(ValueError):
        op_tome(np.ones((10, 3)), target=32)


def _check_optome(frames, target=32, N=75):
    seq = op_tome(frames, N, target)
    L = len(frames)
    spans = seq.spans()
    assert spans[0][0] == 0 and spans[-1][1] == L
    assert all(e0 == s1 for (_, e0), (s1, _) in zip(spans, spans[1:]))
    assert int(seq.sizes.sum()) == L
    assert len(seq) == clip_schedule(L, N, target).levels[-1]
    for (s, e), tok in zip(spans, seq.tokens):
        np.testing.assert_allclose(tok, frames[s:e].mean(axis=0), atol=1e-6)
    return seq


@settings(max_examples=150, deadline=None)
@given(st.integers(33, 256), st.integers(0, 2**32 - 1))
def test_op_tome_structure_random(L, seed):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(L, 8))
    _check_optome(frames)


@pytest.mark.parametrize("backend", backends, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_backends_agree_on_merging(backend):
    rng = np.random.default_rng(5)
    for L in (33, 64, 128, 255):
        frames = rng.normal(size=(L, 12))
        levels = np.asarray(clip_schedule(L, 75, 32).levels, dtype=np.int64)
        t0, s0, p0 = kernels.python.optome_merge(frames, levels)
        t1, s1, p1 = backend.optome_merge(frames, levels)
        np.testing.assert_array_equal(s0, s1)
        np.testing.assert_array_equal(p0, p1)
        np.testing.assert_allclose(t0, t1, atol=1e-12)


@pytest.mark.parametrize("backend", backends, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_backends_agree_on_matching_and_scoring(backend):
    rng = np.random.default_rng(6)
    tok = rng.normal(size=(17, 8))
    d0, s0 = kernels.python.pair_match(tok)
    d1, s1 = backend.pair_match(tok)
    np.testing.assert_array_equal(d0, d1)
    np.testing.assert_allclose(s0, s1, atol=1e-12)
    q = rng.normal(size=(5, 8)).astype(np.float32)
    t = rng.normal(size=(30, 8)).astype(np.float32)
    off = np.array([0, 4, 5, 19, 30], dtype=np.int64)
    np.testing.assert_allclose(kernels.python.segment_max(q, t, off), backend.segment_max(q, t, off), atol=1e-5)
    S = np.clip(rng.normal(size=(9, 9)), -1, 1)
    assert kernels.python.count_above(S, 0.2) == backend.count_above(S, 0.2)


def test_high_sim_ratio_three_clips():
    # unit vectors with pairwise cosines 0.9 (0,1), 0.5 (0,2), 0.8 (1,2)
    G = np.array([[1, .9, .5], [.9, 1, .8], [.5, .8, 1]])
    X = np.linalg.cholesky(G)
    assert high_sim_ratio(X, 0.7) == pytest.approx(2 / 3)


def test_high_sim_ratio_extremes():
    assert high_sim_ratio(np.ones((5, 3)), 0.7) == 1.0
    assert high_sim_ratio(np.eye(4), 0.5) == 0.0
    with pytest.raises(ValueError):
        high_sim_ratio(np.ones((1, 3)), 0.5)


@pytest.mark.parametrize("omega,K,expected", [
    (0.5, 6, 1), (0.9, 6, 2), (1 - 1 / 6, 6, 1), (1.0, 6, 2), (0.0, 6, 1),
    (0.75, 4, 1), (0.76, 4, 2), (0.99, 1, 1), (0.5, 2, 1), (0.51, 2, 2),
])
def test_literal_depth_table(omega, K, expected):
    assert select_merge_depth(omega, K, "literal") == expected


def test_monotone_depth_nondecreasing():
    grid = np.linspace(0, 1, 100)
    ks = [select_merge_depth(w, 6, "monotone") for w in grid]
    assert all(a <= b for a, b in zip(ks, ks[1:]))
    assert ks[0] == 1 and ks[-1] == 6


def test_depth_errors():
    with pytest.raises(ValueError):
        select_merge_depth(0.5, 0)
    with pytest.raises(ValueError):
        select_merge_depth(0.5, 3, "other")


def test_bipartite_hand_case():
    seq = SizedTokenSeq(np.array([[1.0, 0], [1.0, 0], [0, 1.0]]), np.ones(3, np.int64),
                        [np.array([0]), np.array([1]), np.array([2])])
    out = bipartite_merge(seq, 1)
    np.testing.assert_allclose(out.tokens, [[1, 0], [0, 1]])
    assert out.sizes.tolist() == [2, 1]
    assert [p.tolist() for p in out.provenance] == [[0, 1], [2]]


def test_bipartite_rejects_r_too_large():
    seq = SizedTokenSeq.from_frames(np.eye(3))
    with pytest.raises(ValueError):
        bipartite_merge(seq, 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 40), st.integers(0, 2**32 - 1), st.data())
def test_bipartite_conserves_mass_and_means(n, seed, data):
    r = data.draw(st.integers(0, min((n + 1) // 2, n - 1)))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5))
    out = bipartite_merge(SizedTokenSeq.from_frames(x), r)
    out.check()
    assert len(out) == n - r
    for tok, p in zip(out.tokens, out.provenance):
        np.testing.assert_allclose(tok, x[p].mean(axis=0), atol=1e-9)


def test_bipartite_identical_tokens():
    out = bipartite_merge(SizedTokenSeq.from_frames(np.ones((8, 3))), 4)
    assert out.sizes.sum() == 8
    np.testing.assert_allclose(out.tokens, 1.0)


def test_bipartite_follows_schedule_levels():
    rng = np.random.default_rng(2)
    seq = SizedTokenSeq.from_frames(rng.normal(size=(32, 6)))
    sched = clip_schedule(32, 75, 5)
    for r, nxt in zip(sched.merges(), sched.levels[1:]):
        seq = bipartite_merge(seq, r)
        assert len(seq) == nxt


def _clips_for(frames, merge=MergeConfig()):
    raw = op_tome(frames, merge.merge_rate, merge.clip_target)
    return raw, SizedTokenSeq(raw.tokens * 2.0 + 1.0, raw.sizes, raw.provenance)


def test_adaptive_no_merge_keeps_clips():
    rng = np.random.default_rng(3)
    raw, enc = _clips_for(rng.normal(size=(128, 8)))
    res = adaptive_clips(enc, raw.tokens, MergeConfig().schedule(), tau=0.99)
    assert res.depth == 1 and res.n_clips == 32
    np.testing.assert_array_equal(res.frame_to_clip, raw.frame_to_token())


def test_adaptive_literal_high_omega_merges_once():
    rng = np.random.default_rng(4)
    frames = np.ones((128, 8)) + 0.01 * rng.normal(size=(128, 8))
    raw, enc = _clips_for(frames)
    res = adaptive_clips(enc, raw.tokens, MergeConfig().schedule(), tau=0.7, mode="literal")
    assert res.omega > 1 - 1 / 6
    assert res.depth == 2 and res.n_clips == 20
    assert res.set_sizes.sum() == 128


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
def test_adaptive_frame_sets_partition(seed, tau):
    rng = np.random.default_rng(seed)
    raw, enc = _clips_for(rng.normal(size=(64, 4)) + rng.normal(size=4) * 2)
    res = adaptive_clips(enc, raw.tokens, MergeConfig().schedule(), tau, mode="monotone")
    assert res.set_sizes.sum() == 64
    for i, fs in enumerate(res.frame_sets):
        assert np.all(res.frame_to_clip[fs] == i)
    W = res.merge_matrix()
    np.testing.assert_allclose(W.sum(axis=1), 1.0)
    np.testing.assert_allclose(W @ enc.tokens, res.clips.tokens, atol=1e-9)
