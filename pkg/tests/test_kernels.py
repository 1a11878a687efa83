"""Backend parity: the compiled convolution kernels, the vectorized numpy
fallback, and the naive reference loops must agree to float64 roundoff."""

import numpy as np
import pytest

from fednorm import kernels
from fednorm.kernels import conv_numpy


def _case(seed, n=3, ci=4, co=5, h=11, w=9, kh=5, kw=5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, ci, h, w))
    k = rng.standard_normal((co, ci, kh, kw))
    return x, k


@pytest.mark.parametrize("pad", [0, 1, 2])
def test_numpy_forward_matches_naive(pad):
    x, k = _case(0)
    got = conv_numpy.conv2d_forward(x, k, pad)
    want = conv_numpy.conv2d_forward_naive(x, k, pad)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("pad", [0, 2])
def test_backend_forward_parity(pad):
    x, k = _case(1)
    a = conv_numpy.conv2d_forward(x, k, pad)
    b = np.asarray(kernels.conv2d_forward(x, k, pad))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("pad", [0, 2])
def test_backend_backward_parity(pad):
    x, k = _case(2)
    h, w = x.shape[2], x.shape[3]
    y = conv_numpy.conv2d_forward(x, k, pad)
    dy = np.random.default_rng(3).standard_normal(y.shape)
    gi_a = conv_numpy.conv2d_backward_input(dy, k, pad, h, w)
    gi_b = np.asarray(kernels.conv2d_backward_input(dy, k, pad, h, w))
    gk_a = conv_numpy.conv2d_backward_kernel(dy, x, pad, 5, 5)
    gk_b = np.asarray(kernels.conv2d_backward_kernel(dy, x, pad, 5, 5))
    np.testing.assert_allclose(gi_a, gi_b, rtol=0, atol=1e-11)
    np.testing.assert_allclose(gk_a, gk_b, rtol=0, atol=1e-11)


def test_forward_output_shape_valid_padding():
    x, k = _case(4, h=16, w=16)
    y = conv_numpy.conv2d_forward(x, k, 0)
    assert y.shape == (3, 5, 12, 12)


def test_forward_output_shape_same_padding():
    x, k = _case(5, h=16, w=16)
    y = conv_numpy.conv2d_forward(x, k, 2)
    assert y.shape == (3, 5, 16, 16)


def test_backward_input_adjointness():
    # <conv(x), dy> == <x, conv_backward_input(dy)> for every pad
    for pad in (0, 2):
        x, k = _case(6)
        y = conv_numpy.conv2d_forward(x, k, pad)
        dy = np.random.default_rng(7).standard_normal(y.shape)
        gi = conv_numpy.conv2d_backward_input(dy, k, pad, x.shape[2], x.shape[3])
        lhs = float(np.vdot(y, dy))
        rhs = float(np.vdot(x, gi))
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_backend_selection_reports_name():
    assert kernels.BACKEND in ("compiled", "numpy")
