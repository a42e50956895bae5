"""Small parameterized layers on top of :mod:`throttlenet.tensor`.

Each layer knows its per-example output shape and analytic FLOP cost, so a
network can price every gated component before running anything.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Layer:
    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def flops(self, in_shape: tuple[int, ...]) -> int:
        return 0


def _he(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain * math.sqrt(2.0 / fan_in))


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, gain: float = 1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(_he(rng, (out_ch, in_ch, k, k), in_ch * k * k, gain), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self, prefix=""):
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}

    def out_shape(self, in_shape):
        O, C, k, _ = self.weight.shape
        if in_shape[0] != C:
            raise T.ShapeError(f"conv2d expects {C} input channels, got shape {in_shape}")
        H = (in_shape[1] + 2 * self.padding - k) // self.stride + 1
        W = (in_shape[2] + 2 * self.padding - k) // self.stride + 1
        return (O, H, W)

    def flops(self, in_shape):
        O, C, k, _ = self.weight.shape
        _, H, W = self.out_shape(in_shape)
        return 2 * O * C * k * k * H * W + O * H * W


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, gain: float = 1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = Tensor(_he(rng, (n_in, n_out), n_in, gain), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return T.bias_add(T.matmul(x, self.weight), self.bias)

    def parameters(self, prefix=""):
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}

    def out_shape(self, in_shape):
        if in_shape != (self.weight.shape[0],):
            raise T.ShapeError(f"linear expects ({self.weight.shape[0]},) input, got {in_shape}")
        return (self.weight.shape[1],)

    def flops(self, in_shape):
        n_in, n_out = self.weight.shape
        return 2 * n_in * n_out + n_out


class ReLU(Layer):
    def __call__(self, x):
        return T.relu(x)

    def flops(self, in_shape):
        return math.prod(in_shape)


class MaxPool2d(Layer):
    def __init__(self, k: int = 2):
        self.k = k

    def __call__(self, x):
        return T.max_pool2d(x, self.k)

    def out_shape(self, in_shape):
        return (in_shape[0], in_shape[1] // self.k, in_shape[2] // self.k)

    def flops(self, in_shape):
        C, H, W = self.out_shape(in_shape)
        return C * H * W * (self.k * self.k - 1)


class Flatten(Layer):
    def __call__(self, x):
        return T.flatten(x)

    def out_shape(self, in_shape):
        return (math.prod(in_shape),)


class GlobalMeanPool(Layer):
    def __call__(self, x):
        return T.global_mean_pool(x)

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def flops(self, in_shape):
        return math.prod(in_shape)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}{i}."))
        return out

    def out_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.out_shape(in_shape)
        return in_shape

    def flops(self, in_shape):
        total = 0
        for layer in self.layers:
            total += layer.flops(in_shape)
            in_shape = layer.out_shape(in_shape)
        return total
