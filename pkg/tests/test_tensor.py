import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffdetect import tensor as T
from ffdetect.gradcheck import check_primitive, primitive_cases
from ffdetect.tensor import ContractError, Graph, ShapeError, Tensor


def conv_oracle(x, k, pad):
    kh, kw, cin, cout = k.shape
    if pad == "same":
        x = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    h, w = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        for c in range(cin):
                            acc += x[i + a, j + b, c] * k[a, b, c, o]
                out[i, j, o] = acc
    return out


def matmul_oracle(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


@pytest.mark.parametrize("pad", ["same", "valid"])
def test_conv2d_matches_loops(rng, pad):
    x = rng.standard_normal((7, 6, 3))
    k = rng.standard_normal((3, 5, 3, 4))
    got = T.conv2d(Tensor(x), Tensor(k), pad).data
    assert np.max(np.abs(got - conv_oracle(x, k, pad))) < 1e-12


def test_conv2d_is_cross_correlation():
    x = np.zeros((3, 3, 1))
    x[1, 1, 0] = 1.0
    k = np.arange(9.0).reshape(3, 3, 1, 1)
    out = T.conv2d(Tensor(x), Tensor(k)).data[..., 0]
    # an impulse reproduces the kernel rotated by 180 degrees
    np.testing.assert_array_equal(out, k[::-1, ::-1, 0, 0])


def test_matmul_matches_loops(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - matmul_oracle(a, b))) < 1e-12


def test_shape_errors_name_extents():
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        g.backward(y)


def test_second_backward_doubles_grads(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    with Graph() as g:
        y = T.sum(T.square(x))
    g.backward(y)
    first = x.grad.copy()
    g.backward(y)
    np.testing.assert_allclose(x.grad, 2 * first, rtol=0, atol=1e-15)
    T.zero_grad([x])
    assert x.grad is None or not np.any(x.grad)


def test_nothing_recorded_outside_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.add(x, x)
    assert T.current_graph() is None
    assert np.all(y.data == 2)


def test_reused_input_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Graph() as g:
        y = T.sum(T.mul(x, x))
    g.backward(y)
    assert x.grad[0] == 6.0


def test_broadcast_gradient_is_summed(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    with Graph() as g:
        y = T.sum(T.add(a, b))
    g.backward(y)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


@pytest.mark.parametrize("name", T.PRIMITIVES)
def test_primitive_gradients(name):
    rng = np.random.default_rng(7)
    fn, arrays = primitive_cases(rng)[name]
    assert check_primitive(fn, arrays, rng) < 1e-5


def test_every_primitive_has_a_case():
    assert set(primitive_cases(np.random.default_rng(0))) == set(T.PRIMITIVES)


@given(st.integers(1, 6), st.integers(2, 9), st.floats(-50, 50))
def test_softmax_rows_sum_to_one(rows, cols, shift):
    x = np.random.default_rng(rows * 31 + cols).standard_normal((rows, cols)) * 20 + shift
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all(y >= 0)


def test_log_softmax_consistent(rng):
    x = rng.standard_normal((4, 7)) * 5
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), T.softmax_rows(Tensor(x)).data,
                               rtol=0, atol=1e-14)


def test_layernorm_moments(rng):
    x = rng.standard_normal((5, 32)) * 3 + 2
    y = T.layernorm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-7)


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 33)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=0, atol=1e-14)


def test_softplus_is_stable():
    y = T.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    assert np.all(np.isfinite(y))
    assert y[1] == pytest.approx(np.log(2), abs=1e-15)
    assert y[2] == 800.0


@given(st.integers(1, 12), st.integers(1, 12))
def test_resample_matrix_rows_are_stochastic(src, dst):
    m = T.resample_matrix(src, dst)
    assert m.shape == (dst, src)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(m >= 0)


def test_linear_matches_matmul_plus_bias(rng):
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b, atol=1e-13)
