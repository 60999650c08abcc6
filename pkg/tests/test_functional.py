import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from busunet.engine import functional as F
from busunet.engine import tensor as T
from busunet.engine.tensor import Tensor, backward
from busunet.errors import ParameterError, ShapeError


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def naive_conv(x, w, b, pad, stride):
    """Direct nested-loop cross-correlation oracle."""
    (pt, pb), (pl, pr) = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    win = xp[i, :, y * stride : y * stride + kh, z * stride : z * stride + kw]
                    out[i, o, y, z] = (win * w[o]).sum() + (b[o] if b is not None else 0)
    return out


# conv2d -------------------------------------------------------------------


def test_conv_all_ones_same_padding():
    out = F.conv2d(f64(np.ones((1, 1, 3, 3))), f64(np.ones((1, 1, 3, 3))), f64([0.0]))
    np.testing.assert_array_equal(out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity_kernel(rng):
    x = f64(rng.standard_normal((2, 1, 5, 4)))
    out = F.conv2d(x, f64(np.ones((1, 1, 1, 1))), f64([0.0]))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_input_gives_bias(rng):
    b = rng.standard_normal(3)
    out = F.conv2d(f64(np.zeros((2, 2, 4, 4))), f64(rng.standard_normal((3, 2, 3, 3))), f64(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b.reshape(1, 3, 1, 1), (2, 3, 4, 4)))


@pytest.mark.parametrize("padding,stride,k", [("same", 1, 3), ("valid", 1, 3), ("valid", 2, 3), ("same", 1, 5)])
def test_conv_matches_naive_oracle(rng, padding, stride, k):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    pad = ((k // 2, k // 2), (k // 2, k // 2)) if padding == "same" else ((0, 0), (0, 0))
    out = F.conv2d(f64(x), f64(w), f64(b), padding=padding, stride=stride)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, pad, stride), rtol=1e-12, atol=1e-12)


def test_conv_valid_output_extent():
    out = F.conv2d(f64(np.zeros((1, 1, 9, 8))), f64(np.zeros((1, 1, 3, 3))), None, padding="valid", stride=2)
    assert out.shape == (1, 1, 4, 3)


def test_conv_errors():
    x = f64(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        F.conv2d(x, f64(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        F.conv2d(x, f64(np.zeros((1, 2, 2, 2))), padding="same")
    with pytest.raises(ShapeError):
        F.conv2d(x, f64(np.zeros((1, 2, 5, 5))), padding="valid")
    with pytest.raises(ParameterError):
        F.conv2d(x, f64(np.zeros((1, 2, 3, 3))), stride=0)
    with pytest.raises(ParameterError):
        F.conv2d(x, f64(np.zeros((1, 2, 3, 3))), padding="reflect")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), a=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3))
def test_conv_is_linear_in_input_and_kernel(seed, a):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((2, 2, 5, 5))
    w, v = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((3, 2, 3, 3))

    def conv(x, w):
        return F.conv2d(f64(x), f64(w)).data

    np.testing.assert_allclose(conv(a * x, w), a * conv(x, w), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(conv(x + y, w), conv(x, w) + conv(y, w), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(conv(x, w + v), conv(x, w) + conv(x, v), rtol=1e-6, atol=1e-9)


# pooling / upsampling -------------------------------------------------------


def test_maxpool_single_window():
    assert F.maxpool2d(f64([[[[1, 2], [3, 4]]]])).data.item() == 4


def test_maxpool_ramp():
    out = F.maxpool2d(f64(np.arange(16.0).reshape(1, 1, 4, 4)))
    np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])


def test_maxpool_constant_input_routes_to_first_element():
    x = f64(np.full((1, 1, 4, 4), 2.5), grad=True)
    out = F.maxpool2d(x)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))
    backward(T.sum(out))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_gradient_goes_to_argmax_only(rng):
    x = f64(rng.standard_normal((2, 3, 4, 6)), grad=True)
    backward(T.sum(F.maxpool2d(x)))
    assert x.grad.sum() == 2 * 3 * 2 * 3
    windows = x.grad.reshape(2, 3, 2, 2, 3, 2).sum(axis=(3, 5))
    np.testing.assert_array_equal(windows, np.ones((2, 3, 2, 3)))


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ShapeError):
        F.maxpool2d(f64(np.zeros((1, 1, 5, 4))))


def test_upsample_values_and_gradient():
    x = f64([[[[1, 2], [3, 4]]]], grad=True)
    out = F.upsample2x(x)
    np.testing.assert_array_equal(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    backward(T.sum(out))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), h=st.integers(1, 5), w=st.integers(1, 5))
def test_maxpool_inverts_upsample(seed, h, w):
    x = np.random.default_rng(seed).standard_normal((2, 3, h, w))
    np.testing.assert_array_equal(F.maxpool2d(F.upsample2x(f64(x))).data, x)


# batchnorm ----------------------------------------------------------------


def _bn_params(c):
    return f64(np.ones(c)), f64(np.zeros(c)), np.zeros(c), np.ones(c)


def test_batchnorm_train_normalizes(rng):
    x = f64(rng.standard_normal((4, 3, 5, 5)) * 3 + 7)
    g, b, rm, rv = _bn_params(3)
    out = F.batchnorm(x, g, b, rm, rv, training=True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-6
    std = out.std(axis=(0, 2, 3))
    assert np.all((std > 1 - 1e-3) & (std < 1 + 1e-3))


def test_batchnorm_constant_input_is_zero():
    g, b, rm, rv = _bn_params(2)
    out = F.batchnorm(f64(np.full((2, 2, 3, 3), 4.0)), g, b, rm, rv, training=True).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_batchnorm_inference_formula():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    m, v, gamma, beta, eps = 2.0, 4.0, 1.5, -0.5, 1e-5
    out = F.batchnorm(f64(x), f64([gamma]), f64([beta]), np.array([m]), np.array([v]), training=False, eps=eps)
    expected = (x - m) / math.sqrt(v + eps) * gamma + beta
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_batchnorm_running_stats_ema(rng):
    x = rng.standard_normal((4, 2, 3, 3))
    g, b, rm, rv = _bn_params(2)
    F.batchnorm(f64(x), g, b, rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_channel_mismatch():
    g, b, rm, rv = _bn_params(3)
    with pytest.raises(ShapeError):
        F.batchnorm(f64(np.zeros((1, 2, 2, 2))), g, b, rm, rv, training=True)


# dropout ------------------------------------------------------------------


def test_dropout_identities(rng):
    x = f64(rng.standard_normal((2, 3)))
    assert F.dropout(x, 0.0, training=True, rng=1) is x
    assert F.dropout(x, 0.7, training=False, rng=1) is x


def test_dropout_rate_one_rejected():
    with pytest.raises(ParameterError):
        F.dropout(f64([1.0]), 1.0)


def test_dropout_deterministic_under_seed(rng):
    x = f64(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(F.dropout(x, 0.5, rng=9).data, F.dropout(x, 0.5, rng=9).data)


def test_dropout_expectation_monte_carlo():
    x = np.array([0.5, -2.0, 3.0, 1.0])
    draws = np.stack([F.dropout(f64(x), 0.5, rng=s).data for s in range(10_000)])
    np.testing.assert_allclose(draws.mean(axis=0), x, rtol=0.02)


# losses -------------------------------------------------------------------


def test_bce_examples():
    assert F.bce_loss(f64([1.0, 0.0]), np.array([1.0, 0.0])).item() <= -math.log(1 - 1e-7) + 1e-12
    assert F.bce_loss(f64(np.full(5, 0.5)), np.array([0, 1, 1, 0, 1.0])).item() == pytest.approx(math.log(2))
    value = F.bce_loss(f64([0.9, 0.2]), np.array([1.0, 0.0])).item()
    assert value == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, abs=1e-12)
    assert round(value, 5) == 0.16425


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        F.bce_loss(f64([0.5, 0.5]), np.array([1.0]))


def test_bce_zero_gradient_outside_clamp():
    p = f64([0.0, 0.5], grad=True)
    backward(F.bce_loss(p, np.array([1.0, 1.0])))
    assert p.grad[0] == 0.0 and p.grad[1] != 0.0


def test_bce_with_logits_agrees_with_clamped_bce(rng):
    z = rng.standard_normal(50) * 3
    t = (rng.random(50) < 0.4).astype(float)
    fused = F.bce_with_logits(f64(z), t).item()
    plain = F.bce_loss(T.sigmoid(f64(z)), t).item()
    assert fused == pytest.approx(plain, rel=1e-10)


def test_bce_with_logits_gradient_survives_saturation():
    z = f64([-40.0], grad=True)
    backward(F.bce_with_logits(z, np.array([1.0])))
    assert z.grad[0] == pytest.approx(-1.0)
