"""Reverse-mode autodiff: op-by-op finite-difference checks and graph rules."""

import numpy as np
import pytest

from marl.errors import DimensionError, LabelError
from marl.nn import autodiff as ad
from marl.nn.autodiff import Tensor


def fd_check(fn, *arrays, eps=1e-6, tol=1e-6, seed=0):
    """Central finite differences in float64 against analytic gradients."""
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    loss = ad.sum_all(out) if out.data.ndim else out
    loss.backward()
    rng = np.random.default_rng(seed)
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(10, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = fn(*[Tensor(x.data) for x in tensors]).data
            up = up.sum() if getattr(up, "ndim", 0) else up
            flat[i] = keep - eps
            dn = fn(*[Tensor(x.data) for x in tensors]).data
            dn = dn.sum() if getattr(dn, "ndim", 0) else dn
            flat[i] = keep
            fd = (up - dn) / (2 * eps)
            denom = max(abs(fd) + abs(grad[i]), 1e-8)
            assert abs(fd - grad[i]) / denom < tol, f"coord {i}: {fd} vs {grad[i]}"


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def test_add_sub_mul_gradients():
    fd_check(ad.add, rand(3, 4, seed=1), rand(3, 4, seed=2))
    fd_check(ad.sub, rand(3, 4, seed=3), rand(3, 4, seed=4))
    fd_check(ad.mul, rand(3, 4, seed=5), rand(3, 4, seed=6))


def test_broadcast_gradients_reduce_correctly():
    fd_check(ad.add, rand(3, 4, seed=7), rand(4, seed=8))
    fd_check(ad.mul, rand(2, 3, 4, seed=9), rand(1, 3, 1, seed=10))
    # scalar constant operand
    x = Tensor(rand(3, 3, seed=11), requires_grad=True)
    ad.sum_all(ad.mul(x, 2.5)).backward()
    assert np.allclose(x.grad, 2.5)


def test_matmul_gradient_and_shape_guard():
    fd_check(ad.matmul, rand(3, 5, seed=12), rand(5, 2, seed=13))
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(rand(3, 4)), Tensor(rand(3, 4)))


def test_relu_sigmoid_gradients():
    x = rand(4, 4, seed=14)
    x[np.abs(x) < 0.2] += 0.5  # keep clear of the ReLU kink
    fd_check(ad.relu, x)
    fd_check(ad.sigmoid, rand(4, 4, seed=15))
    assert np.allclose(ad.sigmoid(Tensor(np.zeros(3))).data, 0.5)


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(Tensor(np.array([-1e4, 1e4, 0.0])))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == 0.0 and out.data[1] == 1.0


def test_reshape_transpose_gradients():
    fd_check(lambda t: ad.reshape(t, (6, 2)), rand(3, 4, seed=16))
    fd_check(lambda t: ad.transpose(t, (2, 0, 1)), rand(2, 3, 4, seed=17))


def test_reductions_and_mse():
    fd_check(ad.sum_all, rand(3, 4, seed=18))
    fd_check(ad.mean_all, rand(3, 4, seed=19))
    fd_check(ad.mse, rand(5, 3, seed=20), rand(5, 3, seed=21))
    a = Tensor(np.zeros((2, 2)))
    b = Tensor(np.ones((2, 2)))
    assert ad.mse(a, b).item() == 1.0


def test_gather_rows_gradient_accumulates_duplicates():
    table = Tensor(rand(5, 3, seed=22), requires_grad=True)
    idx = np.array([1, 1, 4])
    ad.sum_all(ad.gather_rows(table, idx)).backward()
    expect = np.zeros((5, 3))
    np.add.at(expect, idx, 1.0)
    assert np.array_equal(table.grad, expect)


def test_softmax_cross_entropy_values_and_gradient():
    # uniform logits over 4 classes -> ln 4
    logits = Tensor(np.zeros((2, 4)))
    loss = ad.softmax_cross_entropy(logits, np.array([0, 3]))
    assert abs(loss.item() - np.log(4.0)) < 1e-12
    # near-one-hot at logit 50 -> ~0
    hot = np.zeros((1, 4))
    hot[0, 2] = 50.0
    assert ad.softmax_cross_entropy(Tensor(hot), np.array([2])).item() < 1e-6
    fd_check(lambda t: ad.softmax_cross_entropy(t, np.array([0, 2, 1])),
             rand(3, 4, seed=23))
    with pytest.raises(LabelError):
        ad.softmax_cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))


def test_conv2d_gradients_all_strides():
    for kernel, stride, padding, seed in [(3, 1, 1, 24), (4, 2, 1, 25), (1, 1, 0, 26)]:
        x = rand(2, 3, 6, 6, seed=seed)
        w = rand(4, 3, kernel, kernel, seed=seed + 50) * 0.3
        b = rand(4, seed=seed + 100) * 0.1
        fd_check(lambda t, u, v: ad.conv2d(t, u, v, stride=stride, padding=padding),
                 x, w, b)


def test_conv2d_scalar_kernel():
    x = Tensor(np.array([[[[3.0]]]]))
    w = Tensor(np.array([[[[2.0]]]]))
    b = Tensor(np.zeros(1))
    assert ad.conv2d(x, w, b).data.reshape(()) == 6.0


def test_upsample2x_forward_and_gradient():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    up = ad.upsample2x(Tensor(x)).data
    assert up.shape == (1, 1, 4, 4)
    assert np.array_equal(up[0, 0, :2, :2], np.full((2, 2), 0.0))
    assert np.array_equal(up[0, 0, 2:, 2:], np.full((2, 2), 3.0))
    fd_check(ad.upsample2x, rand(2, 3, 3, 3, seed=27))


def test_stop_gradient_blocks_flow():
    x = Tensor(rand(3, 3, seed=28), requires_grad=True)
    ad.sum_all(ad.mul(ad.stop_gradient(x), 3.0)).backward()
    assert x.grad is None or not np.any(x.grad)


def test_diamond_graph_accumulates_both_paths():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, 3.0), x)  # 3x + x
    ad.sum_all(y).backward()
    assert np.allclose(x.grad, 4.0)


def test_operator_sugar_matches_functions():
    a = Tensor(rand(2, 2, seed=29), requires_grad=True)
    b = Tensor(rand(2, 2, seed=30))
    assert np.array_equal((a + b).data, ad.add(a, b).data)
    assert np.array_equal((a - b).data, ad.sub(a, b).data)
    assert np.array_equal((a * b).data, ad.mul(a, b).data)
    assert np.array_equal((-a).data, -a.data)
