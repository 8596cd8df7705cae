"""Small parameterised building blocks shared by the model modules."""

from __future__ import annotations

import numpy as np

from micar.autodiff import ops
from micar.autodiff.params import Module, normal_init, ones_param, zeros_param
from micar.autodiff.tensor import Tensor


class Linear(Module):
    """``x @ weight (+ bias)`` with weight stored as ``in × out``."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std=None):
        self.weight = normal_init(rng, (d_in, d_out), std)
        self.bias = zeros_param((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = ones_param((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.rmsnorm(x, self.gain, self.eps)


class BatchNorm2d(Module):
    """Unit gain, zero bias; running statistics with momentum 0.1."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class ConvBN(Module):
    """Bias-free convolution followed by batch normalisation (and optional ReLU)."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 relu: bool = True):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel)),
                             requires_grad=True)
        self.bn = BatchNorm2d(c_out)
        self.stride = stride
        self.padding = (kernel - 1) // 2
        self.relu = relu

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        y = self.bn(ops.conv2d(x, self.weight, self.stride, self.padding))
        return ops.relu(y) if self.relu else y
