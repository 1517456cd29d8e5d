"""Adam optimizer: convergence, determinism, divergence guard."""

import numpy as np
import pytest

from marl.errors import StateError, TrainingDivergedError
from marl.nn import autodiff as ad
from marl.nn.autodiff import Parameter, Tensor
from marl.nn.optim import Adam


def test_quadratic_converges_to_minimum():
    x = Parameter(np.array([0.0]), name="x")
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        diff = ad.sub(x, Tensor(np.array([3.0])))
        loss = ad.sum_all(ad.mul(diff, diff))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert abs(float(x.data[0]) - 3.0) < 1e-2


def test_zero_gradient_leaves_parameters_unchanged():
    x = Parameter(np.array([1.5, -2.0]), name="x")
    opt = Adam([x], lr=0.1)
    x.grad = np.zeros_like(x.data)
    opt.step()
    assert np.array_equal(x.data, np.array([1.5, -2.0]))


def run_noisy_descent(seed):
    rng = np.random.default_rng(seed)
    w = Parameter(rng.normal(size=(4, 2)).astype(np.float32), name="w")
    opt = Adam([w], lr=1e-2)
    for _ in range(50):
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        loss = ad.mean_all(ad.mul(ad.matmul(x, w), ad.matmul(x, w)))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return w.data.copy()


def test_identical_seeds_give_bitwise_identical_parameters():
    assert np.array_equal(run_noisy_descent(13), run_noisy_descent(13))


def test_step_rejects_missing_gradient():
    x = Parameter(np.array([1.0]), name="x")
    opt = Adam([x])
    x.grad = None
    with pytest.raises(StateError):
        opt.step()


def test_non_finite_gradient_raises_divergence():
    x = Parameter(np.array([1.0]), name="x")
    opt = Adam([x])
    x.grad = np.array([np.inf])
    with pytest.raises(TrainingDivergedError):
        opt.step(epoch=4)


def test_bias_correction_first_step_moves_by_lr():
    # with m_hat = g and v_hat = g^2, the first update is lr * g/(|g|+eps)
    x = Parameter(np.array([0.0]), name="x")
    opt = Adam([x], lr=0.05)
    x.grad = np.array([7.0])
    opt.step()
    assert abs(float(x.data[0]) + 0.05) < 1e-6
