"""Small float64 neural-net layers with exact backprop.

Everything runs in double precision with fixed call shapes so that training is
bit-reproducible and analytic gradients can be audited against central finite
differences. Layers cache what backward needs; grads accumulate until
zero_grads().
"""
from __future__ import annotations

import numpy as np


class Layer:
    params: list
    grads: list

    def __init__(self):
        self.params = []
        self.grads = []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grads(self):
        for g in self.grads:
            g[...] = 0.0

    def __call__(self, x):
        return self.forward(x)


class Linear(Layer):
    """Affine map over the last axis: y = x @ W.T + b."""

    def __init__(self, rng, n_in, n_out, scale=None):
        super().__init__()
        if scale is None:
            scale = np.sqrt(2.0 / n_in)
        self.w = rng.normal(0.0, scale, size=(n_out, n_in))
        self.b = np.zeros(n_out)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]

    def forward(self, x):
        self._x = np.asarray(x, dtype=float)
        return self._x @ self.w.T + self.b

    def backward(self, dy):
        dy = np.asarray(dy, dtype=float)
        x2 = self._x.reshape(-1, self.w.shape[1])
        dy2 = dy.reshape(-1, self.w.shape[0])
        self.grads[0] += dy2.T @ x2
        self.grads[1] += dy2.sum(axis=0)
        return dy @ self.w


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


class Sigmoid(Layer):
    def forward(self, x):
        # split by sign for numerical stability
        out = np.empty_like(np.asarray(x, dtype=float))
        x = np.asarray(x, dtype=float)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._y = out
        return out

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y**2)


class LayerNorm(Layer):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.g = np.ones(dim)
        self.b = np.zeros(dim)
        self.eps = eps
        self.params = [self.g, self.b]
        self.grads = [np.zeros_like(self.g), np.zeros_like(self.b)]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mu) * self._inv
        return self.g * self._xhat + self.b

    def backward(self, dy):
        n = dy.shape[-1]
        xhat, inv = self._xhat, self._inv
        dy2 = dy.reshape(-1, n)
        xh2 = xhat.reshape(-1, n)
        self.grads[0] += (dy2 * xh2).sum(axis=0)
        self.grads[1] += dy2.sum(axis=0)
        dxhat = dy * self.g
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        return term * inv


def _im2col(x, kh, kw, pad):
    """Unfold (C, H, W) into (C*kh*kw, H*W) patches, stride 1, zero pad."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # rows ordered (channel, ki, kj), columns raster over output pixels
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, h * w)


class Conv2d(Layer):
    """Stride-1 same-padding convolution over a single (C, H, W) sample."""

    def __init__(self, rng, c_in, c_out, ksize=3, scale=None):
        super().__init__()
        if ksize % 2 != 1:
            raise ValueError("ksize must be odd")
        if scale is None:
            scale = np.sqrt(2.0 / (c_in * ksize * ksize))
        self.w = rng.normal(0.0, scale, size=(c_out, c_in, ksize, ksize))
        self.b = np.zeros(c_out)
        self.ksize = ksize
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        c_out, c_in, kh, kw = self.w.shape
        self._shape = x.shape
        self._cols = _im2col(x, kh, kw, kh // 2)
        wmat = self.w.reshape(c_out, -1)
        y = wmat @ self._cols + self.b[:, None]
        return y.reshape(c_out, x.shape[1], x.shape[2])

    def backward(self, dy):
        c_out, c_in, kh, kw = self.w.shape
        h, w = self._shape[1], self._shape[2]
        dy2 = dy.reshape(c_out, -1)
        self.grads[0] += (dy2 @ self._cols.T).reshape(self.w.shape)
        self.grads[1] += dy2.sum(axis=1)
        # dx is the correlation of dy with spatially flipped, transposed weights
        wflip = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
        cols_dy = _im2col(dy.reshape(c_out, h, w), kh, kw, kh // 2)
        return (wflip @ cols_dy).reshape(c_in, h, w)


class AvgPool2d(Layer):
    """2x2 average pooling; trailing odd row/col is dropped."""

    def forward(self, x):
        c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        self._shape = x.shape
        xv = x[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2)
        return xv.mean(axis=(2, 4))

    def backward(self, dy):
        c, h, w = self._shape
        h2, w2 = h // 2, w // 2
        dx = np.zeros(self._shape)
        dx[:, :2 * h2, :2 * w2] = np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) / 4.0
        return dx


class GlobalAvgPool(Layer):
    """(C, H, W) -> (C,) spatial mean."""

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        c, h, w = self._shape
        return np.broadcast_to(dy[:, None, None], self._shape) / (h * w)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    @property
    def params(self):
        return [p for lay in self.layers for p in lay.params]

    @params.setter
    def params(self, value):  # Layer.__init__ assigns []; ignore
        pass

    @property
    def grads(self):
        return [g for lay in self.layers for g in lay.grads]

    @grads.setter
    def grads(self, value):
        pass

    def forward(self, x):
        for lay in self.layers:
            x = lay.forward(x)
        return x

    def backward(self, dy):
        for lay in reversed(self.layers):
            dy = lay.backward(dy)
        return dy

    def zero_grads(self):
        for lay in self.layers:
            lay.zero_grads()


class Adam(Layer):
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__()
        self.p = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.p]
        self.v = [np.zeros_like(p) for p in self.p]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.p, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_arrays(self):
        """Flat list of optimizer state arrays, for checkpointing."""
        return self.m + self.v


def bce_loss(p, y):
    """Mean binary cross entropy and its gradient wrt probabilities p."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    eps = 1e-12
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()
    dp = (pc - y) / (pc * (1.0 - pc)) / p.size
    return loss, dp
