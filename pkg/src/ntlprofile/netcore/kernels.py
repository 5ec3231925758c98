"""Fused element-wise kernels (numba) for the hot layers."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def lrelu_forward(x, alpha):
    out = np.empty_like(x)
    xf = x.ravel()
    of = out.ravel()
    for i in range(xf.size):
        v = xf[i]
        of[i] = v if v > 0 else v * alpha
    return out


@numba.njit(cache=True)
def lrelu_backward(dy, y, alpha):
    # y > 0 exactly where the input was > 0
    out = np.empty_like(dy)
    df = dy.ravel()
    yf = y.ravel()
    of = out.ravel()
    for i in range(df.size):
        of[i] = df[i] if yf[i] > 0 else df[i] * alpha
    return out


@numba.njit(cache=True)
def maxpool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    out = np.empty((n, c, h2, w2), x.dtype)
    arg = np.empty((n, c, h2, w2), np.uint8)
    for a in range(n):
        for b in range(c):
            for i in range(h2):
                for j in range(w2):
                    best = x[a, b, 2 * i, 2 * j]
                    k = 0
                    v = x[a, b, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[a, b, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = x[a, b, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[a, b, i, j] = best
                    arg[a, b, i, j] = k
    return out, arg


@numba.njit(cache=True)
def maxpool_backward(dy, arg, h, w):
    n, c, h2, w2 = dy.shape
    dx = np.zeros((n, c, h, w), dy.dtype)
    for a in range(n):
        for b in range(c):
            for i in range(h2):
                for j in range(w2):
                    k = arg[a, b, i, j]
                    dx[a, b, 2 * i + k // 2, 2 * j + k % 2] = dy[a, b, i, j]
    return dx


@numba.njit(cache=True)
def bn_train_forward(x, gamma, beta, eps):
    """x is (N, C, L). Returns y, xhat, batch mean, biased var, 1/std."""
    n, c, l = x.shape
    m = n * l
    mean = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        s = 0.0
        for a in range(n):
            for k in range(l):
                s += x[a, ch, k]
        mu = s / m
        s2 = 0.0
        for a in range(n):
            for k in range(l):
                d = x[a, ch, k] - mu
                s2 += d * d
        mean[ch] = mu
        var[ch] = s2 / m
    inv_std = 1.0 / np.sqrt(var + eps)
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    for a in range(n):
        for ch in range(c):
            mu = x.dtype.type(mean[ch])
            inv = x.dtype.type(inv_std[ch])
            g = x.dtype.type(gamma[ch])
            bt = x.dtype.type(beta[ch])
            for k in range(l):
                xh = (x[a, ch, k] - mu) * inv
                xhat[a, ch, k] = xh
                y[a, ch, k] = xh * g + bt
    return y, xhat, mean, var, inv_std


@numba.njit(cache=True)
def bn_backward(dy, xhat, gamma, inv_std):
    n, c, l = dy.shape
    m = n * l
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for a in range(n):
        for ch in range(c):
            sb = 0.0
            sg = 0.0
            for k in range(l):
                d = dy[a, ch, k]
                sb += d
                sg += d * xhat[a, ch, k]
            dbeta[ch] += sb
            dgamma[ch] += sg
    dx = np.empty_like(dy)
    for a in range(n):
        for ch in range(c):
            scale = dy.dtype.type(gamma[ch] * inv_std[ch] / m)
            db = dy.dtype.type(dbeta[ch])
            dg = dy.dtype.type(dgamma[ch])
            mm = dy.dtype.type(m)
            for k in range(l):
                dx[a, ch, k] = scale * (mm * dy[a, ch, k] - db - xhat[a, ch, k] * dg)
    return dx, dgamma, dbeta
