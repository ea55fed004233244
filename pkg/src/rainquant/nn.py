"""Convolutional building blocks with explicit forward/backward passes.

Everything works on channels-last (B, H, W, C) arrays, which keeps the
im2col buffers and every reshape around the BLAS matmuls contiguous.
Convolutions are "same"-size with zero padding by default (an optional
periodic mode serves the translation-equivariance harness).  All ops are
deterministic: pooling ties resolve to the first maximum and reductions
run in fixed order.
"""

from __future__ import annotations

import math

import numpy as np


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D:
    """k x k convolution with bias, stride 1, "same" output size.

    Weights are stored (k, k, c_in, c_out); gradients accumulate on
    ``dw``/``db`` during backward.
    """

    def __init__(self, name, c_in, c_out, ksize, rng, dtype=np.float32):
        self.name = name
        self.ksize = ksize
        self.c_in = c_in
        self.c_out = c_out
        fan_in = c_in * ksize * ksize
        fan_out = c_out * ksize * ksize
        self.w = glorot_uniform(rng, (ksize, ksize, c_in, c_out), fan_in, fan_out, dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x, padding="zero", keep=False):
        k = self.ksize
        b, h, w, c = x.shape
        wmat = self.w.reshape(k * k * c, self.c_out)
        if k == 1:
            mat = x.reshape(-1, c)
        else:
            p = k // 2
            mode = "constant" if padding == "zero" else "wrap"
            xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)
            cols = np.stack(
                [xp[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)],
                axis=3)
            mat = cols.reshape(-1, k * k * c)
        out = mat @ wmat + self.b
        if keep:
            self._cache = (mat, (b, h, w, c), padding)
        return out.reshape(b, h, w, self.c_out)

    def backward(self, dout):
        mat, (b, h, w, c), padding = self._cache
        k = self.ksize
        f = self.c_out
        dmat = dout.reshape(-1, f)
        self.dw[...] = (mat.T @ dmat).reshape(self.w.shape)
        self.db[...] = dmat.sum(axis=0)
        dcols = dmat @ self.w.reshape(k * k * c, f).T
        if k == 1:
            return dcols.reshape(b, h, w, c)
        p = k // 2
        dcols = dcols.reshape(b, h, w, k * k, c)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dout.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, idx, :]
        if padding == "zero":
            return dxp[:, p:p + h, p:p + w, :]
        rows = (np.arange(h + 2 * p) - p) % h
        cols_idx = (np.arange(w + 2 * p) - p) % w
        dx = np.zeros((b, h, w, c), dtype=dout.dtype)
        np.add.at(dx, (slice(None), rows[:, None], cols_idx[None, :]), dxp)
        return dx

    def params(self):
        return [(self.name + ".w", self.w), (self.name + ".b", self.b)]

    def grads(self):
        return [(self.name + ".w", self.dw), (self.name + ".b", self.db)]


def activation_forward(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, x.dtype.type(0.1) * x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dout, x, kind):
    if kind == "relu":
        return dout * (x > 0)
    if kind == "leaky_relu":
        return dout * np.where(x > 0, dout.dtype.type(1.0), dout.dtype.type(0.1))
    raise ValueError(f"unknown activation {kind!r}")


def maxpool2_forward(x):
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2 needs even spatial dims")
    xr = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    xr = xr.reshape(b, h // 2, w // 2, 4, c)
    idx = xr.argmax(axis=3)
    out = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, (b, h, w, c) = cache
    dxr = np.zeros((b, h // 2, w // 2, 4, c), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    dxr = dxr.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(dxr).reshape(b, h, w, c)


def upsample2_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    b, h, w, c = dout.shape
    return dout.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def concat_channels(a, b):
    return np.concatenate([a, b], axis=3)


def split_channels(dout, c_first):
    return dout[..., :c_first], dout[..., c_first:]
