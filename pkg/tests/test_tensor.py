"""Autodiff engine: forward values against numpy, gradients against
finite differences, and the bookkeeping rules around backward()."""

import numpy as np
import pytest

from ctadepth import tensor as T
from ctadepth.gradcheck import gradcheck, numerical_grad
from ctadepth.tensor import Tensor

rng = np.random.default_rng(42)


def test_add_mul_forward_values():
    a = Tensor(np.array([1.0, 2.0, 3.0]))
    b = Tensor(np.array([4.0, 5.0, 6.0]))
    assert np.array_equal(T.add(a, b).data, [5.0, 7.0, 9.0])
    assert np.array_equal(T.mul(a, b).data, [4.0, 10.0, 18.0])
    assert np.array_equal((a - b).data, [-3.0, -3.0, -3.0])
    assert np.allclose((a / b).data, np.array([1, 2, 3]) / np.array([4, 5, 6]))


def test_scalar_broadcast_only():
    a = Tensor(rng.standard_normal((3, 4)))
    assert T.add(a, 2.0).data == pytest.approx(a.data + 2.0)
    with pytest.raises(ValueError):
        T.add(a, Tensor(np.ones(4)))  # partial broadcast is not supported


def test_chain_rule_simple():
    x = Tensor(np.array([0.5, -1.2, 2.0]), requires_grad=True)
    y = T.tsum(T.mul(T.exp(x), x))
    y.backward()
    expected = np.exp(x.data) * (1.0 + x.data)
    assert x.grad == pytest.approx(expected, rel=1e-12)


def test_grad_accumulates_when_reused():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = T.add(T.mul(x, x), x)   # x^2 + x
    y.backward()
    assert x.grad.item() == pytest.approx(7.0)


def test_backward_requires_scalar():
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    with pytest.raises(RuntimeError):
        T.exp(x).backward()


def test_backward_twice_raises():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = T.mul(x, x)
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(x, x))
    assert not y.requires_grad


def test_detach_cuts_graph():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = T.mul(x.detach(), Tensor(np.array(3.0), requires_grad=True))
    parents = {id(p) for p in y._parents}
    assert id(x) not in parents


@pytest.mark.parametrize("op", [T.exp, T.log, T.sqrt, T.tanh, T.sigmoid,
                                T.softplus, T.relu, T.absolute, T.square])
def test_unary_gradients(op):
    x = Tensor(rng.uniform(0.2, 2.0, (3, 5)), requires_grad=True)
    gradcheck(lambda t: T.tsum(op(t)), [x], tol=1e-5)


def test_softmax_matches_numpy():
    x = rng.standard_normal((4, 7))
    got = T.softmax(Tensor(x), axis=-1).data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    assert got == pytest.approx(e / e.sum(axis=-1, keepdims=True))
    assert got.sum(axis=-1) == pytest.approx(np.ones(4))


def test_softmax_rejects_nonfinite():
    bad = Tensor(np.array([1.0, np.inf]))
    with pytest.raises(FloatingPointError):
        T.softmax(bad)


def test_matmul_grad():
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    gradcheck(lambda x, y: T.tsum(T.matmul(x, y)), [a, b], tol=1e-6)


def test_reductions_and_reshape():
    x = rng.standard_normal((2, 3, 4))
    t = Tensor(x)
    assert T.tsum(t).data.item() == pytest.approx(x.sum())
    assert T.tmean(t, axis=1).data == pytest.approx(x.mean(axis=1))
    assert T.reshape(t, (6, 4)).data.shape == (6, 4)
    assert T.transpose(Tensor(x[0])).data == pytest.approx(x[0].T)


def test_getitem_slice_and_fancy():
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    y = T.tsum(x[1:3, 0:2])
    y.backward()
    expected = np.zeros((4, 4))
    expected[1:3, 0:2] = 1.0
    assert np.array_equal(x.grad, expected)

    x2 = Tensor(rng.standard_normal(5), requires_grad=True)
    idx = np.array([0, 0, 3])
    T.tsum(x2[idx]).backward()
    assert np.array_equal(x2.grad, [2.0, 0.0, 0.0, 1.0, 0.0])


def test_concat_stack_expand_grads():
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    gradcheck(lambda x, y: T.tsum(T.square(T.concat([x, y], axis=0))), [a, b], tol=1e-6)
    gradcheck(lambda x, y: T.tsum(T.square(T.stack([x, y]))), [a, b], tol=1e-6)
    c = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    gradcheck(lambda t: T.tsum(T.square(T.expand(t, (5, 3)))), [c], tol=1e-6)


def test_clamp_gradient_is_zero_outside():
    x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
    T.tsum(T.clamp(x, 0.0, 1.0)).backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def _conv2d_naive(x, w, stride, pad):
    """Triple-loop reference with the same accumulation order as the kernels."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += xp[ci, oy * stride + ki,
                                      ox * stride + kj] * w[co, ci, ki, kj]
                out[co, oy, ox] = acc
    return out


def test_conv2d_bitwise_vs_naive_small():
    x = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal((5, 3, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w)).data
    ref = _conv2d_naive(x, w, stride=1, pad=1)
    assert np.array_equal(got, ref)


def test_conv2d_stride_and_large_path_agree():
    x = rng.standard_normal((2, 16, 20))
    w = rng.standard_normal((4, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), stride=2).data
    ref = _conv2d_naive(x, w, stride=2, pad=1)
    assert got == pytest.approx(ref, abs=1e-12)


def test_conv2d_gradcheck_with_bias():
    x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    gradcheck(lambda *a: T.tsum(T.square(T.conv2d(*a))), [x, w, b], tol=1e-5)


def test_bilinear_sample_values_and_validity():
    feat = Tensor(np.arange(12, dtype=float).reshape(1, 3, 4))
    coords = Tensor(np.array([[[0.5, 3.0]], [[0.5, 2.0]]]))  # x then y rows
    out, valid = T.bilinear_sample(feat, coords)
    assert float(out.data[0, 0, 0]) == pytest.approx(2.5)   # midpoint of 4-cell
    assert float(out.data[0, 0, 1]) == pytest.approx(11.0)  # exact corner
    assert valid.all()
    _, valid2 = T.bilinear_sample(feat, Tensor(np.array([[[-0.1]], [[0.0]]])))
    assert not valid2.any()


def test_bilinear_sample_gradcheck():
    feat = Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)
    coords = Tensor(rng.uniform(0.7, 4.3, (2, 3, 3)), requires_grad=True)
    gradcheck(lambda f, c: T.tsum(T.square(T.bilinear_sample(f, c)[0])),
              [feat, coords], tol=1e-5)


def test_pixel_shuffle_roundtrip():
    x = rng.standard_normal((8, 3, 5))
    t = T.pixel_shuffle(Tensor(x), 2)
    assert t.data.shape == (2, 6, 10)
    back = T.pixel_unshuffle(t, 2)
    assert np.array_equal(back.data, x)


def test_resize_bilinear_constant_preserved():
    x = Tensor(np.full((1, 4, 6), 3.7))
    up = T.resize_bilinear(x, (8, 12))
    assert up.data == pytest.approx(np.full((1, 8, 12), 3.7))


def test_adaptive_pool_matches_mean():
    x = rng.standard_normal((3, 8, 8))
    pooled = T.adaptive_avg_pool(Tensor(x), (2, 2))
    assert pooled.data[0, 0, 0] == pytest.approx(x[0, :4, :4].mean())
    g = T.global_avg_pool(Tensor(x))
    assert g.data == pytest.approx(x.mean(axis=(1, 2)))


def test_numerical_grad_agrees_on_quadratic():
    x = Tensor(rng.standard_normal(6), requires_grad=True)
    f = lambda t: T.tsum(T.square(t))
    num = numerical_grad(f, [x], 0)
    assert num == pytest.approx(2.0 * x.data, abs=1e-6)


def test_dtype_switch_produces_f32():
    T.set_dtype(np.float32)
    try:
        t = Tensor(np.zeros(3))
        assert t.data.dtype == np.float32
    finally:
        T.set_dtype(np.float64)
