"""Minimal NHWC convolution layers with hand-written reverse-mode gradients.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
"""
import math

import numpy as np


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv3x3(Layer):
    """3x3 same-padded convolution via an im2col matrix product."""

    def __init__(self, cin, cout, rng, dtype=np.float32, input_grad=True):
        super().__init__()
        bound = math.sqrt(6.0 / (9 * cin))
        self.params["weight"] = rng.uniform(-bound, bound, (3, 3, cin, cout)).astype(dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.input_grad = input_grad
        self.zero_grad()

    def forward(self, x, train=True):
        n, h, w, c = x.shape
        xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
        xp[:, 1:-1, 1:-1] = x
        cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
        for di in range(3):
            for dj in range(3):
                cols[:, :, :, di, dj] = xp[:, di:di + h, dj:dj + w]
        weight = self.params["weight"]
        cout = weight.shape[-1]
        cols = cols.reshape(n * h * w, 9 * c)
        y = cols @ weight.reshape(9 * c, cout)
        y += self.params["bias"]
        if train:
            self._cache = (cols, x.shape)
        return y.reshape(n, h, w, cout)

    def backward(self, dy):
        cols, (n, h, w, c) = self._cache
        weight = self.params["weight"]
        cout = weight.shape[-1]
        dy2 = dy.reshape(-1, cout)
        self.grads["weight"] += (cols.T @ dy2).reshape(weight.shape)
        self.grads["bias"] += dy2.sum(axis=0)
        self._cache = None
        if not self.input_grad:
            return None
        dcols = (dy2 @ weight.reshape(9 * c, cout).T).reshape(n, h, w, 3, 3, c)
        dxp = np.zeros((n, h + 2, w + 2, c), dtype=dy.dtype)
        for di in range(3):
            for dj in range(3):
                dxp[:, di:di + h, dj:dj + w] += dcols[:, :, :, di, dj]
        return dxp[:, 1:-1, 1:-1]


class Conv1x1(Layer):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        bound = math.sqrt(3.0 / cin)
        self.params["weight"] = rng.uniform(-bound, bound, (cin, cout)).astype(dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=True):
        if train:
            self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        x = self._x
        cin, cout = self.params["weight"].shape
        self.grads["weight"] += x.reshape(-1, cin).T @ dy.reshape(-1, cout)
        self.grads["bias"] += dy.reshape(-1, cout).sum(axis=0)
        self._x = None
        return dy @ self.params["weight"].T


class UpConv2x2(Layer):
    """Stride-2 transposed convolution with a 2x2 kernel."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        bound = math.sqrt(6.0 / cin)
        self.params["weight"] = rng.uniform(-bound, bound, (cin, 2, 2, cout)).astype(dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=True):
        n, h, w, cin = x.shape
        weight = self.params["weight"]
        cout = weight.shape[-1]
        x2 = x.reshape(-1, cin)
        y = (x2 @ weight.reshape(cin, 4 * cout)).reshape(n, h, w, 2, 2, cout)
        y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, cout)
        y += self.params["bias"]
        if train:
            self._x2 = x2
            self._shape = x.shape
        return y

    def backward(self, dy):
        n, h, w, cin = self._shape
        weight = self.params["weight"]
        cout = weight.shape[-1]
        dyr = dy.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
        self.grads["weight"] += (self._x2.T @ dyr).reshape(weight.shape)
        self.grads["bias"] += dy.reshape(-1, cout).sum(axis=0)
        self._x2 = None
        return (dyr @ weight.reshape(cin, 4 * cout).T).reshape(n, h, w, cin)


class ReLU(Layer):
    def forward(self, x, train=True):
        y = np.maximum(x, 0)
        if train:
            self._mask = x > 0
        return y

    def backward(self, dy):
        dx = dy * self._mask
        self._mask = None
        return dx


class MaxPool2x2(Layer):
    """2x2 max pool; ties route the gradient to the first maximal entry."""

    def forward(self, x, train=True):
        a, b = x[:, 0::2, 0::2], x[:, 0::2, 1::2]
        c, d = x[:, 1::2, 0::2], x[:, 1::2, 1::2]
        y = np.maximum(np.maximum(a, b), np.maximum(c, d))
        if train:
            ma = a == y
            mb = (b == y) & ~ma
            mc = (c == y) & ~(ma | mb)
            md = ~(ma | mb | mc)
            self._masks = (ma, mb, mc, md)
            self._shape = x.shape
        return y

    def backward(self, dy):
        ma, mb, mc, md = self._masks
        dx = np.empty(self._shape, dtype=dy.dtype)
        dx[:, 0::2, 0::2] = dy * ma
        dx[:, 0::2, 1::2] = dy * mb
        dx[:, 1::2, 0::2] = dy * mc
        dx[:, 1::2, 1::2] = dy * md
        self._masks = None
        return dx


class Adam:
    """Adaptive moment estimation over a flat dict of named arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
