"""Small parameterized building blocks on top of :mod:`dcnet.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Param


def kaiming(rng, shape, fan_in):
    """Weights drawn from N(0, 2 / fan_in)."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv:
    """2-D convolution layer with optional bias."""

    def __init__(self, rng, c_in, c_out, k, stride=1, padding=None, bias=True, name="conv", constraint="none"):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Param(kaiming(rng, (c_out, c_in, k, k), c_in * k * k), f"{name}.w", constraint)
        self.bias = Param(np.zeros(c_out), f"{name}.b") if bias else None
        if constraint != "none":
            self.weight.project()

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def c_out(self):
        return self.weight.shape[0]

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x, tape=None):
        b = None if self.bias is None else self.bias.on(tape)
        return T.conv2d(x, self.weight.on(tape), b, stride=self.stride, padding=self.padding)


class Linear:
    def __init__(self, rng, d_in, d_out, name="fc"):
        self.weight = Param(kaiming(rng, (d_out, d_in), d_in), f"{name}.w")
        self.bias = Param(np.zeros(d_out), f"{name}.b")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, tape=None):
        return T.fully_connected(x, self.weight.on(tape), self.bias.on(tape))


class ConvStack:
    """Convolutions with an activation between consecutive layers.

    ``head`` is applied after the last layer (``None`` for a linear output).
    """

    def __init__(self, layers, act="relu", head=None):
        self.layers = list(layers)
        self.act = act
        self.head = head

    @property
    def c_in(self):
        return self.layers[0].c_in

    @property
    def c_out(self):
        return self.layers[-1].c_out

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, x, tape=None):
        if x.shape[0] != self.c_in:
            raise T.DimensionError(f"stack expects {self.c_in} input channels, got {x.shape[0]}")
        for i, layer in enumerate(self.layers):
            x = layer(x, tape)
            if i < len(self.layers) - 1:
                x = T.activation(x, self.act)
        if self.head is not None:
            x = T.activation(x, self.head)
        return x


def conv_stack(rng, widths, kernels, name, head=None):
    """``widths = [c_in, c_1, ..., c_out]`` with one kernel size per layer."""
    layers = [
        Conv(rng, widths[i], widths[i + 1], kernels[i], name=f"{name}.{i}")
        for i in range(len(kernels))
    ]
    return ConvStack(layers, head=head)
