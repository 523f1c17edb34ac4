import numpy as np
import pytest

import stfuse.nn_core as nn
from stfuse.errors import NonFiniteInput, ShapeMismatch
from stfuse.nn_core import Tensor, XorShift64Star, grad_check


def t(a, rg=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=rg)


# -- forward values --

def test_linear_identity():
    y = nn.linear(t([[1.0, 2.0]]), t(np.eye(2)))
    assert np.allclose(y.data, [[1.0, 2.0]])


def test_linear_cancel():
    y = nn.linear(t([[1.0, 1.0]]), t([[1.0], [-1.0]]))
    assert np.allclose(y.data, [[0.0]])


def test_softmax_symmetry():
    y = nn.softmax_rows(t([[0.0, 0.0]]))
    assert np.allclose(y.data, [[0.5, 0.5]])


def test_softmax_ln2():
    y = nn.softmax_rows(t([[np.log(2.0), 0.0]]))
    assert np.allclose(y.data, [[2 / 3, 1 / 3]], atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        nn.softmax_rows(t([[np.nan, 0.0]]))


def test_layer_norm_closed_form():
    x = t([[1.0, -1.0]])
    y = nn.layer_norm(x, t([1.0, 1.0]), t([0.0, 0.0]))
    want = 1.0 / np.sqrt(1.0 + 1e-5)
    assert np.allclose(y.data, [[want, -want]], atol=1e-12)


def test_layer_norm_constant_row_is_beta():
    x = t([[3.0, 3.0, 3.0]])
    beta = t([0.1, 0.2, 0.3])
    y = nn.layer_norm(x, t([2.0, 2.0, 2.0]), beta)
    assert np.allclose(y.data, [beta.data], atol=1e-3)


def test_layer_norm_moments():
    rng = np.random.default_rng(0)
    x = t(rng.standard_normal((5, 8)))
    gamma, beta = t(rng.standard_normal(8)), t(rng.standard_normal(8))
    y = nn.layer_norm(x, gamma, beta)
    # per-row mean/var of (y - beta)/gamma should be 0/1
    z = (y.data - beta.data) / gamma.data
    assert np.allclose(z.mean(axis=1), 0.0, atol=1e-5)
    assert np.allclose(z.var(axis=1), 1.0, atol=1e-4)


def test_sdp_uniform_when_keys_identical():
    q = t(np.random.default_rng(1).standard_normal((3, 4)))
    k = t(np.ones((5, 4)))
    v = t(np.random.default_rng(2).standard_normal((5, 4)))
    y = nn.sdp_attention(q, k, v)
    assert np.allclose(y.data, np.tile(v.data.mean(axis=0), (3, 1)))


def test_sdp_single_row():
    q, k = t([[5.0, -3.0]]), t([[0.1, 0.2]])
    v = t([[7.0, 8.0]])
    y = nn.sdp_attention(q, k, v)
    assert np.allclose(y.data, v.data)


def test_mlp2_zero_input():
    z2 = np.zeros((2, 2))
    y = nn.mlp2(t(z2), t(np.eye(2)), t(np.zeros(2)), t(np.eye(2)), t(np.zeros(2)))
    assert np.allclose(y.data, 0.0)


def test_mlp2_large_positive_identity():
    x = t([[30.0, 40.0]])
    y = nn.mlp2(x, t(np.eye(2)), t(np.zeros(2)), t(np.eye(2)), t(np.zeros(2)))
    assert np.allclose(y.data, x.data, rtol=1e-6)


def test_gelu_reference_values():
    # tanh approximation evaluated directly
    x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    c = np.sqrt(2.0 / np.pi)
    want = 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x ** 3)))
    y = nn.gelu(t(x))
    assert np.allclose(y.data, want, atol=1e-7)


# -- autodiff --

def test_grad_quadratic():
    x = t([1.0, 2.0], rg=True)
    y = (x * x).sum()
    y.backward()
    assert np.allclose(x.grad, [2.0, 4.0])
    rep = grad_check(lambda x: (x * x).sum(), [t([1.0, 2.0], rg=True)],
                     h=1e-6, tol=1e-5)
    assert rep.passed


def test_grad_softmax_sum_is_constant():
    x = t([[0.3, -1.2, 0.7]], rg=True)
    nn.softmax_rows(x).sum().backward()
    assert np.allclose(x.grad, 0.0, atol=1e-12)


def test_grad_broadcast_add():
    x = t(np.ones((3, 4)), rg=True)
    b = t(np.ones(4), rg=True)
    ((x + b) * 2.0).sum().backward()
    assert np.allclose(x.grad, 2.0)
    assert np.allclose(b.grad, 6.0)  # summed over broadcast axis


def test_grad_accumulates_over_reuse():
    x = t([2.0], rg=True)
    y = (x * x + x).sum()
    y.backward()
    assert np.allclose(x.grad, [5.0])


def test_grad_getitem():
    x = t([1.0, 2.0, 3.0], rg=True)
    (x[1] * 10.0).backward()
    assert np.allclose(x.grad, [0.0, 10.0, 0.0])


def test_grad_concat_and_reshape():
    a = t(np.arange(4.0).reshape(2, 2), rg=True)
    b = t(np.ones((1, 2)), rg=True)
    y = nn.concat([a, b], axis=0).reshape((6,)).sum()
    y.backward()
    assert np.allclose(a.grad, 1.0) and np.allclose(b.grad, 1.0)


def test_grad_matmul_batched():
    rng = np.random.default_rng(4)
    a = Tensor(rng.standard_normal((3, 2, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    rep = grad_check(lambda a, b: nn.matmul(a, b).sum(), [a, b],
                     h=1e-6, tol=1e-5)
    assert rep.passed


def test_zero_grad_resets():
    x = t([1.0], rg=True)
    (x * 3.0).sum().backward()
    x.zero_grad()
    assert x.grad is None or np.allclose(x.grad, 0.0)


def test_grad_check_rejects_nonscalar():
    x = t([[1.0, 2.0]], rg=True)
    with pytest.raises(ShapeMismatch):
        grad_check(lambda x: x * 2.0, [x])


# -- rng --

def test_xorshift_deterministic():
    a = XorShift64Star(99)
    b = XorShift64Star(99)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]


def test_xorshift_uniform_bounds():
    r = XorShift64Star(7)
    vals = [r.uniform(-0.25, 0.25) for _ in range(1000)]
    assert min(vals) >= -0.25 and max(vals) <= 0.25
    assert abs(float(np.mean(vals))) < 0.02


def test_xorshift_matrix_scale():
    r = XorShift64Star(3)
    w = r.matrix(16, 8)
    lim = 1.0 / np.sqrt(16)
    assert w.shape == (16, 8) and w.dtype == np.float32
    assert w.min() >= -lim and w.max() <= lim
