import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbrew import tensor as T


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    m, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    r = (h + 2 * pad - k) // stride + 1
    cc = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, m, r, cc))
    for i in range(n):
        for o in range(m):
            for y in range(r):
                for z in range(cc):
                    acc = b[o]
                    for ch in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += w[o, ch, ki, kj] * xp[i, ch, y * stride + ki, z * stride + kj]
                    out[i, o, y, z] = acc
    return out


def naive_pool(x, k, s):
    n, c, h, w = x.shape
    r, cc = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, r, cc))
    for i, ch, y, z in np.ndindex(n, c, r, cc):
        out[i, ch, y, z] = x[i, ch, y * s:y * s + k, z * s:z * s + k].max()
    return out


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@st.composite
def conv_case(draw):
    k = draw(st.integers(1, 3))
    stride = draw(st.integers(1, 2))
    pad = draw(st.integers(0, 1))
    r = draw(st.integers(1, 3))
    c = draw(st.integers(1, 2))
    m = draw(st.integers(1, 3))
    n = draw(st.integers(1, 2))
    h = (r - 1) * stride + k - 2 * pad
    if h < 1:
        h += stride
    if (h + 2 * pad - k) % stride:
        h += stride - (h + 2 * pad - k) % stride
    seed = draw(st.integers(0, 2 ** 16))
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, c, h, h)), rng.normal(size=(m, c, k, k)), rng.normal(size=m),
            stride, pad)


@settings(max_examples=100, deadline=None)
@given(conv_case())
def test_conv_matches_naive_loops(case):
    x, w, b, stride, pad = case
    np.testing.assert_allclose(T.conv2d(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad),
                               rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(conv_case())
def test_conv_backward_matches_finite_differences(case):
    x, w, b, stride, pad = case
    dout = np.random.default_rng(0).normal(size=T.conv2d(x, w, b, stride, pad).shape)

    def f():
        return float((T.conv2d(x, w, b, stride, pad) * dout).sum())

    dx, dw, db = T.conv2d_backward(dout, x, w, stride, pad)
    np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(dw, numeric_grad(f, w), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(db, numeric_grad(f, b), rtol=1e-5, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 7), st.integers(1, 5), st.integers(0, 2 ** 16))
def test_fc_matches_naive_loops(n, d, m, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=m)
    ref = np.array([[b[j] + sum(w[j, i] * x[r, i] for i in range(d)) for j in range(m)]
                    for r in range(n)])
    np.testing.assert_allclose(T.fully_connected(x, w, b), ref, rtol=1e-12, atol=1e-12)


def test_fc_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(3, 2, 2)), rng.normal(size=(4, 4)), rng.normal(size=4)
    dout = rng.normal(size=(3, 4))

    def f():
        return float((T.fully_connected(x, w, b) * dout).sum())

    dx, dw, db = T.fully_connected_backward(dout, x, w)
    assert dx.shape == x.shape
    np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, numeric_grad(f, w), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, numeric_grad(f, b), rtol=1e-6, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(2, 7),
       st.integers(0, 2 ** 16))
def test_max_pool_matches_naive(k, s, c, h, seed):
    if k > h:
        return
    x = np.random.default_rng(seed).normal(size=(2, c, h, h))
    np.testing.assert_array_equal(T.max_pool(x, k, s), naive_pool(x, k, s))


def test_max_pool_backward_routes_to_argmax():
    x = np.random.default_rng(2).normal(size=(2, 3, 6, 6))
    dout = np.random.default_rng(3).normal(size=(2, 3, 3, 3))

    def f():
        return float((T.max_pool(x, 2, 2) * dout).sum())

    np.testing.assert_allclose(T.max_pool_backward(dout, x, 2, 2), numeric_grad(f, x), atol=1e-6)


def test_max_pool_backward_overlapping_windows_sum():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 5.0
    dx = T.max_pool_backward(np.ones((1, 1, 2, 2)), x, 2, 1)
    assert dx[0, 0, 1, 1] == 4.0 and dx.sum() == 4.0


def test_relu_and_backward():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(T.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(T.relu_backward(np.ones(3), x), [0, 0, 1])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 7))
    labels = rng.integers(0, 7, 5)
    loss, d = T.softmax_cross_entropy(logits, labels)
    np.testing.assert_allclose(d, numeric_grad(lambda: T.softmax_cross_entropy(logits, labels)[0],
                                                logits), rtol=1e-6, atol=1e-9)
    p = T.softmax(logits)
    assert np.isclose(loss, -np.mean(np.log(p[np.arange(5), labels])))


def test_softmax_stable_for_large_logits():
    loss, d = T.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
    assert np.isfinite(loss) and np.all(np.isfinite(d))


def test_labels_out_of_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(T.ShapeError):
        T.softmax_cross_entropy(np.zeros((2, 3)), [0])


def test_mac_counts():
    x = np.zeros((2, 8, 12, 12))
    with T.count_macs() as log:
        T.conv2d(x, np.zeros((16, 8, 5, 5)), np.zeros(16))
        T.fully_connected(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros(4))
    assert log == [("conv2d", 2 * 8 * 8 * 16 * 8 * 25), ("fully_connected", 2 * 12)]


def test_one_by_one_conv_single_mac():
    with T.count_macs() as log:
        out = T.conv2d(np.full((1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.0), np.zeros(1))
    assert out.item() == 6.0 and log == [("conv2d", 1)]


@pytest.mark.parametrize("args", [(6, 3, 2, 0), (2, 3, 1, 0), (4, 2, 0, 0)])
def test_conv_size_rejects_untileable(args):
    with pytest.raises(T.ShapeError):
        T.conv_output_size(*args)


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        T.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((3, 1, 3, 3)), np.zeros(3))
    with pytest.raises(T.ShapeError):
        T.fully_connected(np.zeros((1, 5)), np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(T.ShapeError):
        T.max_pool(np.zeros((1, 1, 2, 2)), 3, 1)


def test_float32_preserved():
    x = np.ones((1, 1, 4, 4), np.float32)
    out = T.conv2d(x, np.ones((2, 1, 3, 3), np.float32), np.zeros(2, np.float32))
    assert out.dtype == np.float32
