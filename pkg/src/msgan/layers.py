"""Equalized-learning-rate layers, pixel norm and minibatch standard deviation."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, default_dtype

LRELU_SLOPE = 0.2
PIXEL_NORM_EPS = 1e-8
MBSTD_EPS = 1e-8


def he_scale(fan_in):
    """Run-time weight multiplier ``sqrt(2 / fan_in)``."""
    return math.sqrt(2.0 / fan_in)


class EqLayer:
    """Weights stored as N(0, 1) draws and multiplied by the He constant in forward.

    Constructed without a stream the layer only carries its shape; this is
    what shape audits and parameter counts use.
    """

    def __init__(self, weight_shape, out_features, fan_in, name, stream=None):
        self.weight_shape = tuple(weight_shape)
        self.out_features = out_features
        self.fan_in = fan_in
        self.scale = he_scale(fan_in)
        self.name = name
        self.weight = None
        self.bias = None
        if stream is not None:
            self.initialize(stream)

    def initialize(self, stream):
        dtype = default_dtype()
        self.weight = Tensor(stream.child(self.name).normal(self.weight_shape, dtype),
                             requires_grad=True, name=f"{self.name}.weight")
        self.bias = Tensor(np.zeros(self.out_features, dtype=dtype), requires_grad=True,
                           name=f"{self.name}.bias")

    @property
    def num_parameters(self):
        return int(np.prod(self.weight_shape)) + self.out_features

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def effective_weight(self):
        return F.mul(self.weight, self.scale)


class EqConv2d(EqLayer):
    def __init__(self, cin, cout, k, name, stream=None):
        self.cin, self.cout, self.k = cin, cout, k
        self.padding = (k - 1) // 2
        super().__init__((cout, cin, k, k), cout, cin * k * k, name, stream)

    def out_shape(self, shape):
        n, c, h, w = shape
        if c != self.cin:
            raise F.ShapeError(f"{self.name}: expected {self.cin} input channels, got {c}")
        pad = 2 * self.padding - self.k + 1
        return (n, self.cout, h + pad, w + pad)

    def __call__(self, x):
        return F.conv2d(x, self.effective_weight(), self.bias, self.padding)


class EqDense(EqLayer):
    """Equalized dense layer; ``fan_in`` may be overridden (the 4x4 latent map)."""

    def __init__(self, fin, fout, name, stream=None, fan_in=None):
        self.fin, self.fout = fin, fout
        super().__init__((fout, fin), fout, fan_in or fin, name, stream)

    def __call__(self, x):
        return F.dense(x, self.effective_weight(), self.bias)


def eq_conv2d(params, input):
    """Functional form: ``conv2d(input, raw_weight * c, bias)``."""
    return params(input)


def pixel_norm(input, epsilon=PIXEL_NORM_EPS):
    """Scale each feature vector (axis 1) to unit root-mean-square."""
    ms = F.mean(F.mul(input, input), axis=1, keepdims=True)
    return F.mul(input, F.pow(F.add(ms, epsilon), -0.5))


def minibatch_std(input, epsilon=MBSTD_EPS):
    """Append the batch-averaged population std as one constant feature map."""
    n, _, h, w = input.shape
    centred = F.sub(input, F.mean(input, axis=0, keepdims=True))
    var = F.mean(F.mul(centred, centred), axis=0)
    std = F.pow(F.add(var, epsilon), 0.5)
    stat = F.reshape(F.mean(std), (1, 1, 1, 1))
    return F.concat_channels(input, F.broadcast_to(stat, (n, 1, h, w)))


def to_image(params, activations, m=None):
    """Emit an ``m``-channel image from activations through a 1x1 equalized conv."""
    if m is not None and params.cout != m:
        raise F.ShapeError(f"{params.name}: emits {params.cout} channels, expected m={m}")
    return params(activations)


def from_image(params, image):
    """Lift an image into feature space through a 1x1 equalized conv."""
    return params(image)
