"""Autodiff engine: forward values, backward accumulation, finite differences."""

import numpy as np
import pytest

from roverseg import autodiff as ad
from roverseg.errors import DegenerateInputError, DomainError, ShapeError


def test_scalar_chain_gradient():
    # d/dx [3 * sum(x * x)] = 6x
    x = ad.parameter(np.array([1.0, -2.0, 0.5]))
    y = ad.scale(ad.tsum(ad.mul(x, x)), 3.0)
    y.backward()
    assert np.allclose(x.grad, 6.0 * x.data)


def test_shared_subexpression_accumulates():
    # y = sum(x) + sum(x) must see x twice
    x = ad.parameter(np.ones(4))
    y = ad.add(ad.tsum(x), ad.tsum(x))
    y.backward()
    assert np.array_equal(x.grad, 2.0 * np.ones(4))


def test_no_graph_without_requires_grad():
    a = ad.constant(np.ones(3))
    b = ad.constant(np.ones(3))
    y = ad.mul(a, b)
    assert y._parents == () and y._backprop is None and not y.requires_grad


def test_backward_needs_scalar_root():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ad.mul(x, x).backward()


def test_backward_on_constant_rejected():
    with pytest.raises(DegenerateInputError):
        ad.tsum(ad.constant(np.ones(2))).backward()


def test_relu_subgradient_zero_at_kink():
    x = ad.parameter(np.array([-1.0, 0.0, 2.0]))
    ad.tsum(ad.relu(x)).backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_add_mul_reject_shape_mismatch():
    a = ad.parameter(np.ones(3))
    b = ad.parameter(np.ones(4))
    with pytest.raises(ShapeError):
        ad.add(a, b)
    with pytest.raises(ShapeError):
        ad.mul(a, b)


def test_exp_log_domain_checks():
    with pytest.raises(DomainError):
        ad.exp(ad.constant(np.array([1e4])))
    with pytest.raises(DomainError):
        ad.log(ad.constant(np.array([0.0])))


def test_mean_matches_sum():
    x = ad.parameter(np.arange(6, dtype=np.float64))
    ad.tmean(x).backward()
    assert np.allclose(x.grad, np.full(6, 1.0 / 6.0))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = ad.constant(rng.normal(size=(4, 5, 5)) * 10.0)
    y = ad.softmax_channels(x)
    assert np.allclose(y.data.sum(axis=0), 1.0)
    assert y.data.min() >= 0.0


def test_upsample_values_and_grad():
    x = ad.parameter(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    y = ad.upsample_nearest(x, 2)
    assert y.shape == (1, 4, 4)
    assert np.array_equal(y.data[0, :2, :2], [[1.0, 1.0], [1.0, 1.0]])
    ad.tsum(y).backward()
    # each source pixel fans out to factor^2 outputs
    assert np.array_equal(x.grad, np.full((1, 2, 2), 4.0))


def test_conv2d_known_value():
    # 1x1 input channel, 2x2 kernel of ones over a 2x2 input: valid conv = sum
    x = ad.constant(np.arange(4, dtype=np.float64).reshape(1, 2, 2))
    w = ad.constant(np.ones((1, 1, 2, 2)))
    b = ad.constant(np.array([10.0]))
    y = ad.conv2d(x, w, b)
    assert y.shape == (1, 1, 1)
    assert y.item() == 16.0


def test_conv2d_shape_validation():
    x = ad.constant(np.zeros((2, 4, 4)))
    w = ad.constant(np.zeros((3, 99, 3, 3)))
    with pytest.raises(ShapeError):
        ad.conv2d(x, w, ad.constant(np.zeros(3)))
    w = ad.constant(np.zeros((3, 2, 3, 3)))
    with pytest.raises(ShapeError):
        ad.conv2d(x, w, ad.constant(np.zeros(5)))
    with pytest.raises(ShapeError):
        ad.conv2d(x, w, ad.constant(np.zeros(3)), stride=0)
    with pytest.raises(ShapeError):  # empty output
        ad.conv2d(ad.constant(np.zeros((2, 2, 2))), w, ad.constant(np.zeros(3)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_finite_difference(stride, padding):
    rng = np.random.default_rng(11 + stride * 10 + padding)
    x = ad.parameter(rng.standard_normal((2, 5, 5)))
    w = ad.parameter(rng.standard_normal((3, 2, 3, 3)))
    b = ad.parameter(rng.standard_normal(3))
    proj = None

    def f(_):
        nonlocal proj
        y = ad.conv2d(x, w, b, stride=stride, padding=padding)
        if proj is None:
            proj = ad.constant(rng.standard_normal(y.shape))
        return ad.tsum(ad.mul(y, proj))

    for p in (x, w, b):
        assert ad.grad_check(f, p) < 1e-6


def test_matmul_transpose_finite_difference():
    rng = np.random.default_rng(7)
    a = ad.parameter(rng.standard_normal((3, 4)))
    b_const = ad.constant(rng.standard_normal((4, 2)))
    proj = ad.constant(rng.standard_normal((2, 3)))

    def f(_):
        return ad.tsum(ad.mul(ad.transpose(ad.matmul(a, b_const)), proj))

    assert ad.grad_check(f, a) < 1e-6


def test_row_and_stack_roundtrip_grads():
    x = ad.parameter(np.arange(6, dtype=np.float64).reshape(3, 2))
    rows = [ad.row(x, i) for i in range(3)]
    y = ad.stack_rows(rows)
    assert np.array_equal(y.data, x.data)
    ad.tsum(ad.mul(y, ad.constant(np.full((3, 2), 2.0)))).backward()
    assert np.array_equal(x.grad, np.full((3, 2), 2.0))


def test_permute_grad_scatters_back():
    x = ad.parameter(np.array([10.0, 20.0, 30.0]))
    idx = np.array([2, 0, 1])
    y = ad.permute(x, idx)
    assert np.array_equal(y.data, [30.0, 10.0, 20.0])
    ad.tsum(ad.mul(y, ad.constant(np.array([1.0, 2.0, 3.0])))).backward()
    # weight applied at permuted position must land on the source coordinate
    assert np.array_equal(x.grad, [2.0, 3.0, 1.0])


def test_permute_rejects_non_permutation():
    x = ad.parameter(np.zeros(3))
    with pytest.raises(ShapeError):
        ad.permute(x, np.array([0, 0, 2]))


def test_grad_check_restores_probe_point():
    x = ad.parameter(np.array([1.0, 2.0]))
    before = x.data.copy()
    ad.grad_check(lambda t: ad.tsum(ad.mul(t, t)), x)
    assert np.array_equal(x.data, before)


def test_grad_check_flags_wrong_gradient():
    # op with a deliberately scaled backward pass: the harness must notice
    def bad_square(t):
        y = ad.Tensor(t.data ** 2, requires_grad=True, parents=(t,),
                      backprop=lambda g: ad._accum(t, 1.05 * g * 2.0 * t.data))
        return ad.tsum(y)

    x = ad.parameter(np.array([0.7, -1.3]))
    assert ad.grad_check(bad_square, x) > 1e-4


def test_grad_check_nonfinite_probe_raises():
    # function finite at the probe point but infinite one eps to the left;
    # grad_check must flag the bad evaluation instead of returning garbage
    def f(t):
        val = np.inf if t.data[0] < 1.0 else t.data[0] ** 2
        return ad.Tensor(np.array(val), requires_grad=True, parents=(t,),
                         backprop=lambda g: ad._accum(t, g * 2.0 * t.data))

    x = ad.parameter(np.array([1.00005]))
    with pytest.raises(DomainError):
        ad.grad_check(f, x, eps=1e-4)
