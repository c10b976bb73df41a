"""Layers with hand-written reverse-mode gradients, SGD and a gradient oracle.

Tensors are plain NumPy arrays: float32 for training, float64 for gradient
checks. A layer in training mode caches what its backward pass needs; in eval
mode ``forward`` touches no state and is safe to call from several threads.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEBUG = os.environ.get("HALLUAUDIO_DEBUG", "") not in ("", "0")


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if DEBUG and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {where}")
    return x


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    training = False

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero padding 1."""

    def __init__(self, c_in, c_out, name="conv", rng=None, dtype=np.float32, input_grad=True):
        rng = np.random.default_rng() if rng is None else rng
        std = np.sqrt(2.0 / (c_in * 9))  # Kaiming normal, fan-in
        self.c_in, self.c_out = c_in, c_out
        self.weight = Parameter(f"{name}.weight", (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.input_grad = input_grad
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"conv2d expects a 4-D input (B, C, H, W), got shape {x.shape}")
        B, C, H, W = x.shape
        if C != self.c_in:
            raise ValueError(f"conv2d channel axis: expected {self.c_in}, got {C}")
        cols = kernels.im2col3x3(x.astype(self.weight.value.dtype, copy=False))
        w2 = self.weight.value.reshape(self.c_out, -1)
        out = np.matmul(w2, cols)
        out += self.bias.value[None, :, None]
        if self.training:
            self._cache = (cols, H, W)
        return out.reshape(B, self.c_out, H, W)

    def backward(self, dout):
        cols, H, W = self._cache
        B = dout.shape[0]
        d2 = dout.reshape(B, self.c_out, H * W)
        self.weight.grad += np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(self.weight.value.shape)
        self.bias.grad += d2.sum(axis=(0, 2))
        self._cache = None
        if not self.input_grad:
            return None
        w2 = self.weight.value.reshape(self.c_out, -1)
        return kernels.col2im3x3(np.matmul(w2.T, d2), H, W)


class BatchNorm2d(Layer):
    def __init__(self, channels, name="bn", dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x):
        C = self.gamma.value.shape[0]
        if x.ndim != 4 or x.shape[1] != C:
            raise ValueError(f"batchnorm2d channel axis: expected {C}, got shape {x.shape}")
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if not self.training:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None] * g + b
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ValueError("batchnorm2d in train mode needs at least 2 values per channel")
        B, _, H, W = x.shape
        mean, var = kernels.bn_stats(x.reshape(B, C, H * W))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat, y = kernels.bn_normalize(x.reshape(B, C, H * W), mean, inv, self.gamma.value, self.beta.value)
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * mean
        self.running_var[...] = (1 - m) * self.running_var + m * var * (n / (n - 1))
        self._cache = (xhat, inv)
        return y.reshape(x.shape)

    def backward(self, dout):
        xhat, inv = self._cache
        B, C, H, W = dout.shape
        dx, dgamma, dbeta = kernels.bn_backward(dout.reshape(B, C, H * W), xhat, self.gamma.value, inv)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        self._cache = None
        return dx.reshape(dout.shape)


class ReLU(Layer):
    def __init__(self):
        self._out = None

    def forward(self, x):
        y = kernels.relu_forward(x)
        if self.training:
            self._out = y
        return y

    def backward(self, dout):
        y, self._out = self._out, None
        return kernels.relu_backward(dout, y)


class MaxPool4(Layer):
    """4x4 window, stride 4, trailing rows/cols dropped; ties go to the first max."""

    def __init__(self):
        self._cache = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] < 4 or x.shape[3] < 4:
            raise ValueError(f"maxpool needs H, W >= 4, got shape {x.shape}")
        out, idx = kernels.maxpool4_forward(x)
        if self.training:
            self._cache = (idx, x.shape[2], x.shape[3])
        return out

    def backward(self, dout):
        idx, H, W = self._cache
        self._cache = None
        return kernels.maxpool4_backward(dout, idx, H, W)


def conv2d(x, weight, bias):
    """Functional 3x3 same-padded cross-correlation (no gradient tape)."""
    c_out, c_in = weight.shape[:2]
    if weight.shape[2:] != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {weight.shape[2:]}")
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d channel axis: expected {c_in}, got {x.shape[1]}")
    B, _, H, W = x.shape
    out = np.matmul(weight.reshape(c_out, -1), kernels.im2col3x3(x)) + bias[None, :, None]
    return out.reshape(B, c_out, H, W)


def relu(x):
    return np.maximum(x, 0)


def maxpool(x, window=4):
    if window != 4:
        raise ValueError("only 4x4 pooling is supported")
    if x.ndim != 4 or x.shape[2] < 4 or x.shape[3] < 4:
        raise ValueError(f"maxpool needs H, W >= 4, got shape {x.shape}")
    return kernels.maxpool4_forward(x)[0]


# ------------------------------------------------------------------ optimisation


def sgd_step(params, lr, weight_decay=0.0):
    """value -= lr * (grad + weight_decay * value); gradients are zeroed afterwards."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.value -= (lr * (p.grad + weight_decay * p.value)).astype(p.value.dtype, copy=False)
        p.zero_grad()


class SGD:
    """Plain SGD with optional (off by default) heavy-ball momentum."""

    def __init__(self, params, lr=0.01, weight_decay=1e-4, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.value) for p in self.params] if momentum else None

    def step(self):
        if not self.momentum:
            sgd_step(self.params, self.lr, self.weight_decay)
            return
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        for p, v in zip(self.params, self._velocity):
            v *= self.momentum
            v += p.grad + self.weight_decay * p.value
            p.value -= self.lr * v
            p.zero_grad()


def lr_schedule(epoch, base_lr, step_size):
    """Step decay: divide by 10 every ``step_size`` epochs."""
    return base_lr * 10.0 ** (-(epoch // step_size))


def finite_diff_grad(loss_fn, param: Parameter, epsilon=1e-6, indices=None):
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``param.value``.

    ``indices`` restricts the probe to some flat coordinates; the other entries
    of the returned array are NaN.
    """
    flat = param.value.reshape(-1)
    out = np.full(flat.shape, np.nan if indices is not None else 0.0, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + epsilon
        plus = float(loss_fn())
        flat[i] = old - epsilon
        minus = float(loss_fn())
        flat[i] = old
        out[i] = (plus - minus) / (2 * epsilon)
    return out.reshape(param.value.shape)
