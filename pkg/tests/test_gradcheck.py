"""Finite-difference verification of every differentiable op."""

import numpy as np
import pytest

from icar.errors import ContractError
from icar.numerics import Tensor, finite_diff_check, ops

SEEDS = range(20)


def test_quadratic_form_tight():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))

    def f(x):
        return ops.sum_all(ops.mul(x, ops.matmul(Tensor(a), x)))

    err = finite_diff_check(f, Tensor(rng.normal(size=(5, 1))), eps=1e-5)
    assert err < 1e-8


def test_eps_out_of_range_rejected():
    with pytest.raises(ContractError):
        finite_diff_check(lambda x: ops.sum_all(x), Tensor([1.0]), eps=1e-2)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grad(seed):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.normal(size=(4, 3)))

    def f(x):
        return ops.mean_all(ops.matmul(x, b))

    assert finite_diff_check(f, Tensor(rng.normal(size=(2, 4)))) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_weight_case_grad(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3, 4)))

    def f(w):
        return ops.mean_all(ops.mul(ops.matmul(a, w), ops.matmul(a, w)))

    assert finite_diff_check(f, Tensor(rng.normal(size=(4, 2)))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_grad(seed):
    rng = np.random.default_rng(seed)
    weights = Tensor(rng.normal(size=(3, 5)))

    def f(x):
        return ops.sum_all(ops.mul(ops.softmax(x, axis=-1), weights))

    assert finite_diff_check(f, Tensor(rng.normal(size=(3, 5)))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_log_softmax_grad(seed):
    rng = np.random.default_rng(seed)
    weights = Tensor(rng.normal(size=(3, 5)))

    def f(x):
        return ops.mean_all(ops.mul(ops.log_softmax(x, axis=-1), weights))

    assert finite_diff_check(f, Tensor(rng.normal(size=(3, 5)))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_grad(seed):
    rng = np.random.default_rng(seed)
    gain = Tensor(rng.normal(size=6))
    bias = Tensor(rng.normal(size=6))

    def f(x):
        y = ops.layer_norm(x, gain, bias)
        return ops.sum_all(ops.mul(y, y))

    assert finite_diff_check(f, Tensor(rng.normal(size=(2, 6)))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_affine_grads(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)))
    bias = Tensor(rng.normal(size=4))

    def f(gain):
        return ops.sum_all(ops.layer_norm(x, gain, bias))

    assert finite_diff_check(f, Tensor(rng.normal(size=4))) < 1e-6


def test_layer_norm_composed_with_matmul():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(6, 4)))
    gain = Tensor(rng.normal(size=4))
    bias = Tensor(rng.normal(size=4))
    c = Tensor(rng.normal(size=(3, 4)))

    def f(x):
        y = ops.layer_norm(ops.matmul(x, w), gain, bias)
        return ops.sum_all(ops.mul(y, c))

    assert finite_diff_check(f, Tensor(rng.normal(size=(3, 6)))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_gelu_grad(seed):
    rng = np.random.default_rng(seed)

    def f(x):
        return ops.sum_all(ops.gelu(x))

    assert finite_diff_check(f, Tensor(rng.normal(size=7))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_grad(seed):
    rng = np.random.default_rng(seed)

    def f(x):
        return ops.sum_all(ops.mul(ops.sigmoid(x), ops.sigmoid(x)))

    assert finite_diff_check(f, Tensor(rng.normal(size=5))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_grad(seed):
    rng = np.random.default_rng(seed)
    k = Tensor(rng.normal(size=(2, 3, 4)))
    v = Tensor(rng.normal(size=(2, 3, 4)))

    def f(q):
        out = ops.scaled_dot_attention(q, k, v)
        return ops.mean_all(ops.mul(out, out))

    assert finite_diff_check(f, Tensor(rng.normal(size=(2, 3, 4)))) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_l2_normalize_grad(seed):
    rng = np.random.default_rng(seed)
    weights = Tensor(rng.normal(size=(2, 5)))

    def f(x):
        return ops.sum_all(ops.mul(ops.l2_normalize(x), weights))

    assert finite_diff_check(f, Tensor(rng.normal(size=(2, 5)))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_pool_pipeline_grad(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 4, 4, 2)))

    def f(w):
        y = ops.avg_pool2d(ops.gelu(ops.conv2d_3x3(x, w)))
        return ops.mean_all(ops.mul(y, y))

    assert finite_diff_check(f, Tensor(rng.normal(size=(3, 3, 2, 2)) * 0.5)) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_gather_concat_reshape_grad(seed):
    rng = np.random.default_rng(seed)

    def f(x):
        a = ops.take_rows(x, np.array([2, 0, 1]))
        b = ops.take_rows(x, np.array([1, 1, 3]))
        joined = ops.concat([a, b], axis=0)
        flat = ops.reshape(joined, (joined.size,))
        return ops.sum_all(ops.mul(flat, flat))

    assert finite_diff_check(f, Tensor(rng.normal(size=(4, 3)))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_pick_and_mean_axes_grad(seed):
    rng = np.random.default_rng(seed)
    cols = np.array([1, 0, 2])

    def f(x):
        pooled = ops.mean_axes(x, (1,))
        return ops.sum_all(ops.mul(ops.pick(pooled, cols), ops.pick(pooled, cols)))

    assert finite_diff_check(f, Tensor(rng.normal(size=(3, 2, 3)))) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_transpose_grad(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(2, 4, 3)))

    def f(x):
        return ops.sum_all(ops.mul(ops.transpose(x, (0, 2, 1)), w))

    assert finite_diff_check(f, Tensor(rng.normal(size=(2, 3, 4)))) < 1e-5
