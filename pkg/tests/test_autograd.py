import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from prvrlab import autograd as ag
from prvrlab.autograd import Tensor


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def check(f, *params, tol=1e-6, **kw):
    rep = ag.grad_check(f, list(params), tol=tol, **kw)
    assert rep.passed, str(rep)
    return rep


def test_scalar_chain_by_hand():
    x = t(3.0)
    y = x * x + ag.exp(x * 0.0) * 2.0
    ag.backward(y)
    assert float(y.data) == 11.0
    assert float(x.grad) == pytest.approx(6.0)


def test_shared_subexpression_accumulates():
    x = t([1.0, 2.0])
    y = (x * x).sum() + (x * 3.0).sum()
    ag.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_rejects_vector_loss():
    with pytest.raises(ag.ShapeError):
        ag.backward(t([1.0, 2.0]) * 2.0)


def test_non_finite_forward_raises():
    with pytest.raises(ag.NonFiniteError):
        ag.log(t([0.0, 1.0]))


def test_no_grad_builds_no_graph():
    x = t([1.0, 2.0])
    with ag.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_cosine_zero_norm_raises():
    with pytest.raises(ZeroDivisionError):
        ag.cosine_sim(t([0.0, 0.0]), t([1.0, 0.0]))


@pytest.mark.parametrize("name,fn,shapes", [
    ("add-broadcast", lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
    ("mul-broadcast", lambda a, b: (a * b * a).sum(), [(2, 3), (1, 3)]),
    ("div", lambda a, b: (a / (b * b + 1.0)).sum(), [(3,), (3,)]),
    ("matmul-batched", lambda a, b: ag.tanh(a @ b).sum(), [(2, 3, 4), (4, 5)]),
    ("gelu", lambda a: ag.gelu(a).sum(), [(5,)]),
    ("softmax-bias", lambda a: (ag.softmax(a, axis=-1, bias=np.array([0.0, -1e9, 0.3])) * np.arange(3.0)).sum(),
     [(2, 3)]),
    ("log-softmax", lambda a: (ag.log_softmax(a) * np.arange(4.0)).sum(), [(3, 4)]),
    ("logsumexp-mask", lambda a: ag.logsumexp(a, axis=0, mask=np.array([[1, 0], [1, 1], [0, 1]], bool)).sum(),
     [(3, 2)]),
    ("layer-norm", lambda x, g, b: (ag.layer_norm(x, g, b) ** 2 * np.arange(4.0)).sum(), [(3, 4), (4,), (4,)]),
    ("normalize", lambda a: (ag.normalize(a) * np.array([1.0, -2.0, 0.5])).sum(), [(2, 3)]),
    ("cosine-matrix", lambda a, b: ag.cosine_matrix(a, b).sum(), [(3, 4), (2, 4)]),
    ("huber", lambda a, b: ag.huber(a * 3.0, b, 1.0).sum(), [(6,), (6,)]),
    ("take", lambda a: (a[np.array([0, 2, 2])] ** 2).sum(), [(4, 2)]),
    ("concat-stack", lambda a, b: (ag.concat([a, b], axis=0).sum(axis=1) * ag.stack([a.sum(), b.sum()]).sum())
     .sum(), [(2, 3), (1, 3)]),
    ("reshape-transpose", lambda a: (ag.swapaxes(a.reshape(2, 3, 2), 0, 2) * np.arange(12.0).reshape(2, 3, 2))
     .sum(), [(3, 4)]),
    ("mean-max", lambda a: a.mean(axis=0).sum() + a.max(axis=1).sum(), [(3, 4)]),
    ("sqrt-power", lambda a: (ag.sqrt(a * a + 1.0) + ag.power(a * a + 1.0, 1.5)).sum(), [(4,)]),
])
def test_op_gradients(name, fn, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = [t(rng.normal(size=s)) for s in shapes]
    check(fn, *params)


def test_relu_gradient_away_from_kink():
    x = t([-1.5, -0.2, 0.3, 2.0])
    check(lambda a: (ag.relu(a) * np.array([1.0, 2.0, 3.0, 4.0])).sum(), x)


def test_corrupted_gradient_is_caught():
    x = t(np.random.default_rng(0).normal(size=(4,)))
    f = lambda a: (a ** 3).sum()
    good = ag.grad_check(f, [x], tol=1e-6)
    assert good.passed
    wrong = [3 * x.data ** 2 + 1e-3]
    bad = ag.grad_check(f, [x], tol=1e-6, grads=wrong)
    assert not bad.passed
    assert bad.max_rel_err > 1e-4


def test_grad_check_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        ag.grad_check(lambda a: a.sum(), [x])


def test_max_coords_subsamples():
    x = t(np.arange(100.0))
    rep = ag.grad_check(lambda a: (a * a).sum(), [x], max_coords=7)
    assert rep.n_checked == 7 and rep.passed


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
def test_matmul_gradient_matches_closed_form(a, b):
    A, B = t(a), t(b)
    ag.backward((A @ B).sum())
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ b.T)
    np.testing.assert_allclose(B.grad, a.T @ np.ones((3, 2)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-20, 20)))
def test_softmax_rows_sum_to_one(x):
    p = ag.softmax(t(x)).data
    assert p.sum() == pytest.approx(1.0)
    assert np.all(p >= 0)
