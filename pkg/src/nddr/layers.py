"""Parameter-holding layers: convolutions, batch norm, pooling, dense.

Layers own their tensors and expose ``params()`` / ``buffers()`` pairs of
(suffix, object) so the graph builder can register everything under stable
hierarchical names. Forward methods call the primitives in nddr.ops.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .autodiff import Tensor

__all__ = ["he_uniform", "xavier_uniform", "Conv2d", "Linear", "BatchNorm", "MaxPool"]


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d:
    """kxk correlation with optional bias; 1x1/stride-1 takes the GEMM fast path."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        pad: Optional[int] = None,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if pad is None:
            pad = kernel // 2  # same-size output at stride 1
        self.stride = stride
        self.pad = pad
        self.kernel = kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        w = he_uniform(rng, (out_channels, kernel, kernel, in_channels), kernel * kernel * in_channels, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, 1, 1, out_channels), dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if self.kernel == 1 and self.stride == 1 and self.pad == 0:
            return ops.conv1x1(x, self.weight, self.bias)
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def params(self):
        out = [("weight", self.weight, True)]
        if self.bias is not None:
            out.append(("bias", self.bias, False))
        return out

    def buffers(self):
        return []


class Linear:
    """Dense layer over (N,1,1,D) activations."""

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        w = he_uniform(rng, (out_features, 1, 1, in_features), in_features, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, 1, 1, out_features), dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight, True), ("bias", self.bias, False)]

    def buffers(self):
        return []


class BatchNorm:
    """Channelwise batch norm with running statistics.

    Train mode normalizes by batch moments and folds them into the running
    estimates as new = momentum * old + (1 - momentum) * batch (biased
    variance). Eval mode normalizes by the stored estimates. Identity mode
    short-circuits normalization entirely (frozen zero mean, unit variance,
    eps treated as 0) so a fresh layer passes values through bit-exactly.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9, affine: bool = True, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        if affine:
            self.gamma = Tensor(np.ones((1, 1, 1, channels), dtype=dtype), requires_grad=True)
            self.beta = Tensor(np.zeros((1, 1, 1, channels), dtype=dtype), requires_grad=True)
        else:
            self.gamma = None
            self.beta = None
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor, train: bool, identity: bool = False) -> Tensor:
        if identity:
            zero = np.zeros(self.channels, dtype=x.dtype)
            one = np.ones(self.channels, dtype=x.dtype)
            return ops.batch_norm_eval(x, self.gamma, self.beta, zero, one, eps=0.0)
        if train:
            out, mean, var = ops.batch_norm_train(x, self.gamma, self.beta, self.eps)
            self.running_mean *= self.momentum
            self.running_mean += (1.0 - self.momentum) * mean
            self.running_var *= self.momentum
            self.running_var += (1.0 - self.momentum) * var
            return out
        return ops.batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)

    def params(self):
        if not self.affine:
            return []
        return [("gamma", self.gamma, False), ("beta", self.beta, False)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class MaxPool:
    def __init__(self, window: int = 2, stride: Optional[int] = None):
        self.window = window
        self.stride = stride if stride is not None else window

    def forward(self, x: Tensor) -> Tensor:
        return ops.max_pool(x, self.window, self.stride)

    def params(self):
        return []

    def buffers(self):
        return []
