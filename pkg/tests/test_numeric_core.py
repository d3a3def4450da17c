import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from npsemiseg.errors import OracleError, ShapeError
from npsemiseg.gradcheck import finite_difference_check, gradient_report
from npsemiseg.ops import (Conv2d, conv2d, dropout, global_avg_pool, instance_norm, linear, softmax,
                           tile_vector, tiled_conv2d)
from npsemiseg.rng import Rng
from npsemiseg.segmodel import avg_pool2d
from npsemiseg.tensor import (Parameter, Tensor, broadcast_to, concat, exp, log, no_grad, relu,
                              softplus, sqrt, stack, tsum)


def conv_oracle(x, w, b):
    """Direct double-precision cross-correlation with zero padding k//2."""
    x, w, b = (np.asarray(a, np.float64) for a in (x, w, b))
    cout, cin, k, _ = w.shape
    pad = k // 2
    _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                total = b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            total += w[o, c, di, dj] * xp[c, i + di, j + dj]
                out[o, i, j] = total
    return out


def param(rng, *shape, scale=1.0):
    return Parameter(rng.normal(size=shape) * scale)


# conv2d ----------------------------------------------------------------------

def test_conv_identity_kernel():
    x = Tensor(np.arange(3 * 4 * 4, dtype=np.float32).reshape(3, 4, 4))
    w = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
    assert np.array_equal(conv2d(x, w, Tensor(np.zeros(3))).data, x.data)


def test_conv_channel_sum():
    out = conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.full((1, 2, 1, 1), 0.5)), Tensor(np.zeros(1)))
    assert out.shape == (1, 4, 4) and np.all(out.data == 1.0)


def test_conv3x3_matches_direct_summation(np_rng):
    x = np_rng.normal(size=(3, 5, 5)).astype(np.float32)
    layer = Conv2d(3, 4, 3, Rng(0))
    got = layer(Tensor(x)).data
    assert got.shape == (4, 5, 5)
    assert np.abs(got - conv_oracle(x, layer.weight.data, layer.bias.data)).max() <= 1e-5


def test_conv_batched_equals_per_image(np_rng):
    layer = Conv2d(2, 3, 3, Rng(1))
    xs = np_rng.normal(size=(4, 2, 6, 5)).astype(np.float32)
    batched = layer(Tensor(xs)).data
    for i in range(4):
        np.testing.assert_allclose(batched[i], layer(Tensor(xs[i])).data, atol=1e-6)


def test_conv_rejects_bad_shapes():
    w = Tensor(np.zeros((2, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((4, 5, 5))), w, Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((3, 5, 5))), w, Tensor(np.zeros(2)), padding=0)
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((2, 3, 5, 5))), Tensor(np.zeros(2)))


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.floats(-2, 2), st.floats(-2, 2),
       st.integers(0, 2**32 - 1))
def test_conv_and_linear_are_linear_in_input(cin, cout, k, a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, cin, 4, 5))
    w = Tensor(rng.normal(size=(cout, cin, k, k)))
    zero = Tensor(np.zeros(cout))
    lhs = conv2d(Tensor(a * x + b * y), w, zero).data
    rhs = a * conv2d(Tensor(x), w, zero).data + b * conv2d(Tensor(y), w, zero).data
    assert np.abs(lhs - rhs).max() <= 1e-4
    wl = Tensor(rng.normal(size=(cout, cin)))
    xl, yl = rng.normal(size=(2, 3, cin))
    lhs = linear(Tensor(a * xl + b * yl), wl, zero).data
    rhs = a * linear(Tensor(xl), wl, zero).data + b * linear(Tensor(yl), wl, zero).data
    assert np.abs(lhs - rhs).max() <= 1e-4


def test_tiled_conv_equals_conv_of_tiled_maps(np_rng):
    v = np_rng.normal(size=(3, 4))
    w = np_rng.normal(size=(5, 4, 3, 3))
    direct = conv2d(tile_vector(Tensor(v), 6, 7), Tensor(w), Tensor(np.zeros(5))).data
    assert np.abs(tiled_conv2d(Tensor(v), Tensor(w), 6, 7).data - direct).max() <= 1e-12


# instance norm ---------------------------------------------------------------

def test_instance_norm_constant_channel_is_zero():
    out = instance_norm(Tensor(np.full((2, 3, 3), 4.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.all(out.data == 0)


def test_instance_norm_affine_collapse(np_rng):
    out = instance_norm(Tensor(np_rng.normal(size=(3, 4, 4))), Tensor(np.zeros(3)),
                        Tensor(np.array([1.0, -2.0, 0.5])))
    assert np.array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5])[:, None, None], (3, 4, 4)))


def test_instance_norm_standardises(np_rng):
    x = np_rng.normal(3.0, 2.0, size=(2, 3, 3))
    out = instance_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).data.astype(np.float64)
    assert np.abs(out.mean(axis=(1, 2))).max() <= 1e-4
    assert np.abs(out.var(axis=(1, 2)) - 1).max() <= 1e-4


def test_instance_norm_rejects_single_pixel():
    with pytest.raises(ShapeError):
        instance_norm(Tensor(np.ones((2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# relu / linear / softmax / pooling ------------------------------------------

def test_relu_cases_and_subgradient():
    assert relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0, 0, 2]
    x = np.array([0.0, 1.5, 3.0])
    assert np.array_equal(relu(Tensor(x)).data, x)
    p = Parameter(np.array([-1.0, 2.0]))
    tsum(relu(p)).backward()
    assert p.grad.tolist() == [0, 1]
    z = Parameter(np.array([0.0]))
    tsum(relu(z)).backward()
    assert z.grad.tolist() == [0]


def test_linear_examples(np_rng):
    x = np_rng.normal(size=(3, 4))
    assert np.allclose(linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x, atol=1e-7)
    assert linear(Tensor(np.array([1.0, 1.0])), Tensor(np.array([[1.0, 1.0]])),
                  Tensor(np.array([1.0]))).data.tolist() == [3.0]
    w, b = np_rng.normal(size=(5, 4)), np_rng.normal(size=5)
    got = linear(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)), Tensor(b.astype(np.float32))).data
    assert np.abs(got - (x.astype(np.float32).astype(np.float64) @ w.astype(np.float32).astype(np.float64).T
                         + b.astype(np.float32))).max() <= 1e-5
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.zeros(2)))


def test_softmax_examples():
    assert np.allclose(softmax(Tensor(np.zeros(3))).data, 1 / 3, atol=1e-7)
    assert np.allclose(softmax(Tensor(np.array([0.0, math.log(3)], np.float64))).data, [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance_is_bitwise():
    x = np.array([[1.0, -3.0, 7.0], [2.0, 2.0, 0.0]], np.float32)
    assert np.array_equal(softmax(Tensor(x)).data, softmax(Tensor(x + 256.0)).data)


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=8))
def test_softmax_on_simplex(values):
    p = softmax(Tensor(np.array(values, np.float32))).data
    assert np.all(p >= 0) and abs(float(p.sum(dtype=np.float64)) - 1) <= 1e-6


def test_global_avg_pool_examples(np_rng):
    assert global_avg_pool(Tensor(np.full((2, 3, 3), 2.5))).data.tolist() == [2.5, 2.5]
    assert global_avg_pool(Tensor(np.array([[[1.0, 3.0], [5.0, 7.0]]]))).data.tolist() == [4.0]
    x = np_rng.normal(size=(4, 5, 3)).astype(np.float32)
    assert np.abs(global_avg_pool(Tensor(x)).data - x.astype(np.float64).mean(axis=(1, 2))).max() <= 1e-6


def test_tile_vector_shapes():
    v = Tensor(np.array([1.0, 2.0]))
    out = tile_vector(v, 2, 2)
    assert out.shape == (2, 2, 2) and np.all(out.data[:, 1, 0] == [1, 2])
    assert tile_vector(v, 3, 4, reps=5).shape == (5, 2, 3, 4)
    assert tile_vector(Tensor(np.zeros((5, 8))), 3, 4).shape == (5, 8, 3, 4)


def test_dropout_identity_when_disabled(np_rng):
    x = Tensor(np_rng.normal(size=(3, 4)))
    assert dropout(x, 0.0, Rng(0)) is x
    assert dropout(x, 0.5, None) is x


# gradients -------------------------------------------------------------------

def check(f, params, tol=1e-3):
    rep = gradient_report(f, params, seed=0)
    assert rep.max_rel_error <= tol, rep
    return rep


extent = st.integers(1, 5)


@given(extent, extent, st.integers(2, 5), st.integers(2, 5), st.sampled_from([1, 3]), st.integers(0, 2**31))
def test_conv2d_gradients(cin, cout, h, w, k, seed):
    rng = np.random.default_rng(seed)
    x, wt, b = param(rng, cin, h, w), param(rng, cout, cin, k, k), param(rng, cout)
    g = rng.normal(size=(cout, h, w))
    check(lambda: tsum(conv2d(x, wt, b) * g), [x, wt, b])


@given(extent, st.integers(2, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_instance_norm_gradients(c, h, w, seed):
    rng = np.random.default_rng(seed)
    x, gamma, beta = param(rng, c, h, w), param(rng, c), param(rng, c)
    g = rng.normal(size=(c, h, w))
    check(lambda: tsum(instance_norm(x, gamma, beta) * g), [x, gamma, beta])


@given(extent, extent, extent, st.integers(0, 2**31))
def test_linear_softmax_gradients(n, din, dout, seed):
    rng = np.random.default_rng(seed)
    x, w, b = param(rng, n, din), param(rng, dout, din), param(rng, dout)
    g = rng.normal(size=(n, dout))
    check(lambda: tsum(softmax(linear(x, w, b), axis=-1) * g), [x, w, b])


@given(extent, extent, extent, st.integers(0, 2**31))
def test_pool_tile_gradients(c, h, w, seed):
    rng = np.random.default_rng(seed)
    x, v, vt = param(rng, c, h, w), param(rng, c), param(rng, 3, c)
    g1, g2, g3 = rng.normal(size=c), rng.normal(size=(2, c, h, w)), rng.normal(size=(3, c, h, w))
    check(lambda: tsum(global_avg_pool(x) * g1) + tsum(tile_vector(v, h, w, reps=2) * g2)
          + tsum(tile_vector(vt, h, w) * g3), [x, v, vt])


@given(extent, extent, st.integers(2, 5), st.integers(2, 5), st.integers(0, 2**31))
def test_tiled_conv_gradients(v, cout, h, w, seed):
    rng = np.random.default_rng(seed)
    vec, wt = param(rng, 3, v), param(rng, cout, v, 3, 3)
    g = rng.normal(size=(3, cout, h, w))
    check(lambda: tsum(tiled_conv2d(vec, wt, h, w) * g), [vec, wt])


@given(extent, extent, st.integers(0, 2**31))
def test_elementwise_gradients(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, n, m), Parameter(rng.uniform(0.5, 2.0, size=(n, m)))
    g = rng.normal(size=(n, m))

    def f():
        y = exp(a * 0.3) + log(b) + sqrt(b) + softplus(a) + relu(a) + a / b - b
        return tsum(y * g)

    check(f, [a, b])


@given(extent, extent, st.integers(0, 2**31))
def test_shape_op_gradients(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, n, m), param(rng, n, m)
    g = rng.normal(size=(2, n, 2 * m))

    def f():
        cat = concat([a, b], axis=1)
        st_ = stack([cat, cat[:, ::-1]])
        return tsum(st_ * g) + tsum(broadcast_to(a[:1], (3, n, m)) * 0.5) + tsum(a[[0, 0]] * 2.0)

    check(f, [a, b])


def test_avg_pool_and_dropout_gradients(np_rng):
    x = param(np_rng, 2, 4, 6)
    g = np_rng.normal(size=(2, 2, 3))
    check(lambda: tsum(avg_pool2d(x, 2) * g), [x])
    # dropout with a fixed stream is a fixed mask, hence linear
    g2 = np_rng.normal(size=(2, 4, 6))
    check(lambda: tsum(dropout(x, 0.3, Rng(5)) * g2), [x])


def test_fd_oracle_sum_of_squares(np_rng):
    p = param(np_rng, 3, 4)
    assert finite_difference_check(lambda: tsum(p * p), [p]) <= 1e-6


def test_fd_oracle_constant_in_one_param(np_rng):
    p, q = param(np_rng, 3), param(np_rng, 2)
    gradient_report(lambda: tsum(p * p) + 0.0 * tsum(q), [p, q])
    out = tsum(p * p) + 0.0 * tsum(q)
    out.backward()
    assert np.abs(q.grad).max() <= 1e-6


def test_fd_oracle_restores_float32_state(np_rng):
    p = param(np_rng, 3)
    before = p.data.copy()
    gradient_report(lambda: tsum(p * p), [p])
    assert p.data.dtype == np.float32 and np.array_equal(p.data, before)


def test_fd_oracle_rejects_non_finite():
    p = Parameter(np.array([-1.0]))
    with pytest.raises(OracleError), np.errstate(invalid="ignore"):
        finite_difference_check(lambda: tsum(log(p)), [p])


def test_no_grad_records_nothing(np_rng):
    p = param(np_rng, 3)
    with no_grad():
        out = tsum(p * p)
    assert not out.requires_grad


def test_rng_reproducible_and_label_split():
    a = Rng(9).child("x").normal((4,))
    assert np.array_equal(a, Rng(9).child("x").normal((4,)))
    assert not np.array_equal(a, Rng(9).child("y").normal((4,)))
    assert not np.array_equal(a, Rng(10).child("x").normal((4,)))
    # fixed bits, so identical on every platform
    assert Rng(0).child("probe").integers(0, 2**31) == Rng(0).child("probe").integers(0, 2**31)
    with pytest.raises(ValueError):
        Rng(-1)
