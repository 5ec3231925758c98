"""Layers with explicit forward and backward rules on NCHW numpy arrays.

Each layer's ``forward`` returns ``(output, cache)``; ``backward`` consumes the
cache and the output gradient, writes parameter gradients into ``grads`` and
returns the input gradient. Randomness comes from a caller-supplied
``numpy.random.Generator`` so identical seeds reproduce identical passes.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch.nn.grad import conv2d_input, conv2d_weight

from . import kernels
from .params import ParamSet

TRAIN = "train"
EVAL = "eval"
# batch statistics feed the BN running averages; noise and dropout stay off
CALIBRATE = "calibrate"


class ShapeError(ValueError):
    pass


def _t(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a))


class Layer:
    name = ""

    def init_params(self, params: ParamSet, rng: np.random.Generator) -> None:
        pass

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x, params, mode, rng, update_stats=True):
        raise NotImplementedError

    def backward(self, dy, cache, params, grads):
        raise NotImplementedError


class GaussianNoise(Layer):
    def __init__(self, sigma: float, name: str = "noise"):
        self.sigma = sigma
        self.name = name

    def forward(self, x, params, mode, rng, update_stats=True):
        if mode != TRAIN or self.sigma == 0:
            return x, None
        return x + (self.sigma * rng.standard_normal(x.shape)).astype(x.dtype), None

    def backward(self, dy, cache, params, grads):
        return dy


class Conv2d(Layer):
    """Square-kernel convolution with "same" padding and bias."""

    def __init__(self, name: str, cin: int, cout: int, k: int, input_grad: bool = True):
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        self.input_grad = input_grad

    @property
    def n_params(self) -> int:
        return self.k * self.k * self.cin * self.cout + self.cout

    def init_params(self, params, rng):
        fan_in = self.cin * self.k * self.k
        limit = math.sqrt(6.0 / fan_in)
        params.add(f"{self.name}.w", rng.uniform(-limit, limit, (self.cout, self.cin, self.k, self.k)))
        params.add(f"{self.name}.b", np.zeros(self.cout))

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {c}")
        return (self.cout, h, w)

    def forward(self, x, params, mode, rng, update_stats=True):
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError(f"{self.name}: expected (N, {self.cin}, H, W) input, got {x.shape}")
        w, b = params[f"{self.name}.w"], params[f"{self.name}.b"]
        with torch.no_grad():
            y = F.conv2d(_t(x), _t(w), _t(b), padding=self.k // 2).numpy()
        return y, x

    def backward(self, dy, cache, params, grads):
        x = cache
        w = params[f"{self.name}.w"]
        g = _t(dy)
        with torch.no_grad():
            grads[f"{self.name}.w"] = conv2d_weight(_t(x), w.shape, g, padding=self.k // 2).numpy()
            dx = conv2d_input(x.shape, _t(w), g, padding=self.k // 2).numpy() if self.input_grad else None
        grads[f"{self.name}.b"] = dy.sum(axis=(0, 2, 3))
        return dx


class LeakyReLU(Layer):
    def __init__(self, alpha: float = 0.1, name: str = "lrelu"):
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.alpha = alpha
        self.name = name

    def forward(self, x, params, mode, rng, update_stats=True):
        y = kernels.lrelu_forward(np.ascontiguousarray(x), x.dtype.type(self.alpha))
        return y, y

    def backward(self, dy, cache, params, grads):
        return kernels.lrelu_backward(np.ascontiguousarray(dy), cache, dy.dtype.type(self.alpha))


class BatchNorm(Layer):
    """Per-channel batch normalization over (N, H, W) or N for 2-D input.

    Running statistics move as ``m*running + (1-m)*batch``; during the first
    updates ``m`` is capped at ``1 - 1/(n+1)`` so the running values start from
    a plain cumulative average instead of the zero/one initialisation.
    """

    def __init__(self, name: str, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        self.name, self.channels, self.momentum, self.eps = name, channels, momentum, eps

    @property
    def n_params(self) -> int:
        return 2 * self.channels

    def init_params(self, params, rng):
        params.add(f"{self.name}.gamma", np.ones(self.channels))
        params.add(f"{self.name}.beta", np.zeros(self.channels))
        params.add_buffer(f"{self.name}.mean", np.zeros(self.channels))
        params.add_buffer(f"{self.name}.var", np.ones(self.channels))

    def _bcast(self, v, x):
        return v.reshape((1, -1, 1, 1) if x.ndim == 4 else (1, -1)).astype(x.dtype, copy=False)

    def forward(self, x, params, mode, rng, update_stats=True):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        gamma = params[f"{self.name}.gamma"]
        beta = params[f"{self.name}.beta"]
        if mode in (TRAIN, CALIBRATE):
            x3 = np.ascontiguousarray(x).reshape(x.shape[0], x.shape[1], -1)
            y, xhat, mean, var, inv_std = kernels.bn_train_forward(x3, gamma, beta, self.eps)
            if update_stats:
                m = x3.shape[0] * x3.shape[2]
                n = params.bn_updates.get(self.name, 0)
                mom = min(self.momentum, 1.0 - 1.0 / (n + 1))
                unbiased = var * m / max(m - 1, 1)
                params.buffers[f"{self.name}.mean"] = mom * params.buffers[f"{self.name}.mean"] + (1 - mom) * mean
                params.buffers[f"{self.name}.var"] = mom * params.buffers[f"{self.name}.var"] + (1 - mom) * unbiased
                params.bn_updates[self.name] = n + 1
            return y.reshape(x.shape), (xhat, inv_std)
        inv_std = 1.0 / np.sqrt(params.buffers[f"{self.name}.var"] + self.eps)
        scale = gamma * inv_std
        shift = beta - params.buffers[f"{self.name}.mean"] * scale
        return x * self._bcast(scale, x) + self._bcast(shift, x), None

    def backward(self, dy, cache, params, grads):
        if cache is None:
            raise RuntimeError(f"{self.name}: backward is only defined for train-mode passes")
        xhat, inv_std = cache
        dy3 = np.ascontiguousarray(dy).reshape(xhat.shape)
        dx, dgamma, dbeta = kernels.bn_backward(dy3, xhat, params[f"{self.name}.gamma"], inv_std)
        grads[f"{self.name}.gamma"] = dgamma
        grads[f"{self.name}.beta"] = dbeta
        return dx.reshape(dy.shape)


class MaxPool2x2(Layer):
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped."""

    name = "maxpool"

    def out_shape(self, shape):
        c, h, w = shape
        return (c, h // 2, w // 2)

    def forward(self, x, params, mode, rng, update_stats=True):
        out, arg = kernels.maxpool_forward(np.ascontiguousarray(x))
        return out, (arg, x.shape)

    def backward(self, dy, cache, params, grads):
        arg, shape = cache
        return kernels.maxpool_backward(np.ascontiguousarray(dy), arg, shape[2], shape[3])


class Dropout(Layer):
    def __init__(self, p: float = 0.5, name: str = "dropout"):
        self.p = p
        self.name = name

    def forward(self, x, params, mode, rng, update_stats=True):
        if mode != TRAIN or self.p == 0:
            return x, None
        keep = (rng.random(x.shape) >= self.p).astype(x.dtype) / x.dtype.type(1.0 - self.p)
        return x * keep, keep

    def backward(self, dy, cache, params, grads):
        return dy if cache is None else dy * cache


class Dense(Layer):
    def __init__(self, name: str, n_in: int, n_out: int):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    @property
    def n_params(self) -> int:
        return self.n_in * self.n_out + self.n_out

    def init_params(self, params, rng):
        limit = math.sqrt(6.0 / self.n_in)
        params.add(f"{self.name}.w", rng.uniform(-limit, limit, (self.n_in, self.n_out)))
        params.add(f"{self.name}.b", np.zeros(self.n_out))

    def forward(self, x, params, mode, rng, update_stats=True):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected (N, {self.n_in}) input, got {x.shape}")
        return x @ params[f"{self.name}.w"] + params[f"{self.name}.b"], x

    def backward(self, dy, cache, params, grads):
        grads[f"{self.name}.w"] = cache.T @ dy
        grads[f"{self.name}.b"] = dy.sum(axis=0)
        return dy @ params[f"{self.name}.w"].T


def run_forward(layers, x, params, mode, rng, keep_cache=True, update_stats=True):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x, params, mode, rng, update_stats)
        caches.append(cache if keep_cache else None)
    return x, caches


def run_backward(layers, caches, dy, params, grads):
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dy = layer.backward(dy, cache, params, grads)
    return dy
