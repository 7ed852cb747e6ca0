import numpy as np
import pytest

from msgan.autodiff import functional as F
from msgan.autodiff.rng import RngStream
from msgan.autodiff.tensor import Tensor
from msgan.layers import EqConv2d, EqDense, from_image, he_scale, minibatch_std, pixel_norm, to_image
from msgan.selftest import minibatch_std_oracle


def test_he_constant_for_3x3_conv():
    layer = EqConv2d(512, 512, 3, "c")
    assert layer.fan_in == 4608
    assert layer.scale == pytest.approx(0.020833, abs=1e-6)


def test_he_constant_for_4x4_map_is_one_64th():
    layer = EqDense(512, 512 * 16, "map", fan_in=512 * 16)
    assert layer.fan_in == 8192
    assert layer.scale == 1 / 64
    assert he_scale(8192) == 0.015625


def test_initialization_draws_unit_normal_weights(double):
    layer = EqConv2d(64, 64, 3, "c", RngStream(0))
    w = layer.weight.data
    assert abs(w.mean()) < 0.02 and abs(w.std() - 1.0) < 0.02
    assert not layer.bias.data.any()


def test_zero_weights_give_bias(double):
    layer = EqConv2d(2, 3, 3, "c", RngStream(0))
    layer.weight.data[:] = 0
    layer.bias.data[:] = [1.0, 2.0, 3.0]
    y = layer(Tensor(np.random.default_rng(0).normal(size=(2, 2, 4, 4))))
    np.testing.assert_array_equal(y.data, np.broadcast_to(np.array([1.0, 2.0, 3.0])[None, :, None, None], y.shape))


def test_equalized_forward_scales_weight(double, rng):
    layer = EqConv2d(3, 2, 3, "c", RngStream(1))
    x = rng.normal(size=(1, 3, 5, 5))
    ref = F.conv2d(Tensor(x), Tensor(layer.weight.data * he_scale(27)), Tensor(np.zeros(2)), padding=1)
    np.testing.assert_allclose(layer(Tensor(x)).data, ref.data)


# -------------------------------------------------------------- pixel norm

def test_pixel_norm_all_ones_unchanged(double):
    x = np.ones((2, 5, 3, 3))
    np.testing.assert_allclose(pixel_norm(Tensor(x)).data, x, atol=1e-8)


def test_pixel_norm_hand_value(double):
    y = pixel_norm(Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))).data.ravel()
    np.testing.assert_allclose(y, [0.8485, 1.1314], atol=1e-4)
    assert np.sqrt(np.mean(y ** 2)) == pytest.approx(1.0, abs=1e-9)


def test_pixel_norm_zero_vector_is_finite(double):
    y = pixel_norm(Tensor(np.zeros((1, 4, 2, 2)))).data
    assert np.all(np.isfinite(y)) and not y.any()


# ---------------------------------------------------------- minibatch std

def test_minibatch_std_identical_samples(double):
    # the epsilon sits inside the square root, so the constant map is sqrt(1e-8)
    x = np.tile(np.random.default_rng(0).normal(size=(1, 3, 2, 2)), (4, 1, 1, 1))
    y = minibatch_std(Tensor(x)).data
    np.testing.assert_allclose(y[:, -1], 0.0, atol=1e-4)
    np.testing.assert_allclose(y[:, -1], 1e-4, rtol=1e-6)


def test_minibatch_std_two_values(double):
    y = minibatch_std(Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))).data
    np.testing.assert_allclose(y[:, 1], 1.0, atol=1e-7)


def test_minibatch_std_channel_accounting():
    y = minibatch_std(Tensor(np.zeros((4, 512, 4, 4), dtype=np.float32)))
    assert y.shape == (4, 513, 4, 4)


def test_minibatch_std_matches_loop_oracle(double, rng):
    x = rng.normal(size=(3, 2, 3, 3))
    y = minibatch_std(Tensor(x)).data
    np.testing.assert_allclose(y[:, -1], minibatch_std_oracle(x), atol=1e-12)


# ------------------------------------------------------- image converters

def test_to_image_rgb_shape():
    layer = EqConv2d(64, 3, 1, "to_rgb", RngStream(0))
    y = to_image(layer, Tensor(np.zeros((1, 64, 16, 16), dtype=np.float32)), m=3)
    assert y.shape == (1, 3, 16, 16)


def test_to_image_wrong_m_rejected():
    with pytest.raises(F.ShapeError):
        to_image(EqConv2d(64, 3, 1, "t"), Tensor(np.zeros((1, 64, 4, 4), dtype=np.float32)), m=10)


def test_to_image_ten_channels_and_zero_weights(double):
    layer = EqConv2d(8, 10, 1, "t", RngStream(0))
    layer.weight.data[:] = 0
    layer.bias.data[:] = np.arange(10)
    y = to_image(layer, Tensor(np.ones((1, 8, 4, 4))), m=10)
    np.testing.assert_array_equal(y.data[0, :, 0, 0], np.arange(10))


def test_from_image_replicates_single_channel(double):
    layer = EqConv2d(1, 3, 1, "f", RngStream(0))
    layer.weight.data[:] = 1.0 / layer.scale
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
    y = from_image(layer, Tensor(x)).data
    for c in range(3):
        np.testing.assert_allclose(y[0, c], x[0, 0], atol=1e-12)


def test_from_image_zero_image_gives_bias(double):
    layer = EqConv2d(3, 64, 1, "f", RngStream(0))
    layer.bias.data[:] = 0.5
    y = from_image(layer, Tensor(np.zeros((1, 3, 8, 8))))
    assert y.shape == (1, 64, 8, 8) and np.all(y.data == 0.5)
