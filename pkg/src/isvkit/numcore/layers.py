"""Layers with hand-written forward and backward passes.

Every layer caches what it needs from the last ``forward`` call and
accumulates parameter gradients into ``grads`` on ``backward``. Call
``zero_grad`` before each optimization step.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import DimensionError


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _xavier_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class. Parameter-free layers leave ``params`` empty."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def descriptor(self):
        return {"type": type(self).__name__}

    def __call__(self, x):
        return self.forward(x)


class Dense(Layer):
    """Fully connected layer, ``out = x @ W + b``.

    ``init`` is ``"he"`` for layers feeding ReLU/MFM and ``"xavier"``
    for layers feeding sigmoid/softmax.
    """

    def __init__(self, n_in, n_out, rng=None, init="he", dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.n_in, self.n_out, self.init = int(n_in), int(n_out), init
        if init == "he":
            W = _he_uniform(rng, (n_in, n_out), n_in, dtype)
        elif init == "xavier":
            W = _xavier_uniform(rng, (n_in, n_out), n_in, n_out, dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params = {"W": W, "b": np.zeros(n_out, dtype=dtype)}
        self.zero_grad()

    def forward(self, x):
        W = self.params["W"]
        if x.ndim != 2 or x.shape[1] != W.shape[0]:
            raise DimensionError(
                f"dense input shape {x.shape} incompatible with weight shape {W.shape}"
            )
        self._x = x
        return x @ W + self.params["b"]

    def backward(self, dout):
        self.grads["W"] += self._x.T @ dout
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["W"].T

    def descriptor(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out, "init": self.init}


class Conv2d(Layer):
    """2-D cross-correlation over ``(batch, channels, H, W)`` input."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, rng=None,
                 init="he", dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        self.init = init
        fan_in = in_ch * kernel * kernel
        shape = (out_ch, in_ch, kernel, kernel)
        if init == "he":
            W = _he_uniform(rng, shape, fan_in, dtype)
        else:
            W = _xavier_uniform(rng, shape, fan_in, out_ch * kernel * kernel, dtype)
        self.params = {"W": W, "b": np.zeros(out_ch, dtype=dtype)}
        self.zero_grad()

    def output_shape(self, H, W):
        k, s, p = self.kernel, self.stride, self.padding
        return (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(
                f"conv input shape {x.shape} incompatible with weight shape "
                f"{self.params['W'].shape}"
            )
        k, s, p = self.kernel, self.stride, self.padding
        N, C, H, W = x.shape
        if H + 2 * p < k or W + 2 * p < k:
            raise DimensionError(
                f"kernel {k}x{k} larger than padded input {(H + 2 * p, W + 2 * p)}"
            )
        Ho, Wo = self.output_shape(H, W)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        # (N, Ho, Wo, C, k, k) -> rows of receptive fields
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
        Wm = self.params["W"].reshape(self.out_ch, -1)
        out = cols @ Wm.T + self.params["b"]
        self._cache = (x.shape, xp.shape, cols, Ho, Wo)
        return out.reshape(N, Ho, Wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        xshape, xpshape, cols, Ho, Wo = self._cache
        k, s, p = self.kernel, self.stride, self.padding
        N, C = xshape[:2]
        dflat = dout.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, self.out_ch)
        Wm = self.params["W"].reshape(self.out_ch, -1)
        self.grads["W"] += (dflat.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] += dflat.sum(axis=0)
        dcols = (dflat @ Wm).reshape(N, Ho, Wo, C, k, k)
        dxp = np.zeros(xpshape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp

    def descriptor(self):
        return {"type": "Conv2d", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding,
                "init": self.init}


class MFM(Layer):
    """Max feature map: elementwise max of the two halves of axis 1.

    Ties go to the first half, so exactly one element of each pair
    receives gradient.
    """

    def forward(self, x):
        if x.ndim < 2 or x.shape[1] % 2:
            raise DimensionError(f"MFM needs an even channel count, got shape {x.shape}")
        k = x.shape[1] // 2
        a, b = x[:, :k], x[:, k:]
        self._mask = a >= b
        return np.where(self._mask, a, b)

    def backward(self, dout):
        return np.concatenate([dout * self._mask, dout * ~self._mask], axis=1)


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    def __init__(self, size=2):
        super().__init__()
        self.size = int(size)

    def forward(self, x):
        s = self.size
        N, C, H, W = x.shape
        Ho, Wo = H // s, W // s
        if Ho == 0 or Wo == 0:
            raise DimensionError(f"pool size {s} larger than input {x.shape}")
        xc = x[:, :, :Ho * s, :Wo * s]
        win = xc.reshape(N, C, Ho, s, Wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, s * s)
        idx = win.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        (N, C, H, W), idx = self._cache
        s = self.size
        Ho, Wo = dout.shape[2:]
        dwin = np.zeros((N, C, Ho, Wo, s * s), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dxc = dwin.reshape(N, C, Ho, Wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * s, Wo * s)
        dx = np.zeros((N, C, H, W), dtype=dout.dtype)
        dx[:, :, :Ho * s, :Wo * s] = dxc
        return dx

    def descriptor(self):
        return {"type": "MaxPool2d", "size": self.size}


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Sigmoid(Layer):
    def forward(self, x):
        self._y = expit(x)
        return self._y

    def backward(self, dout):
        y = self._y
        return dout * y * (1.0 - y)


class Softmax(Layer):
    """Softmax along ``axis`` (the class axis, last by default)."""

    def __init__(self, axis=-1):
        super().__init__()
        self.axis = axis

    def forward(self, x):
        self._y = softmax(x, axis=self.axis)
        return self._y

    def backward(self, dout):
        y = self._y
        return y * (dout - (dout * y).sum(axis=self.axis, keepdims=True))

    def descriptor(self):
        return {"type": "Softmax", "axis": self.axis}


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def activation_apply(x, kind, axis=-1):
    """Stateless activation used outside a layer stack."""
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return expit(x)
    if kind == "softmax":
        return softmax(x, axis=axis)
    raise ValueError(f"unknown activation {kind!r}")


class Sequential(Layer):
    """Chain of layers sharing one forward/backward pass."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self, prefix=""):
        """Yield ``(name, layer, key)`` for every trainable array."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Sequential):
                yield from layer.named_params(f"{prefix}{i}.")
            else:
                for key in layer.params:
                    yield f"{prefix}{i}.{key}", layer, key

    def descriptor(self):
        return {"type": "Sequential", "layers": [l.descriptor() for l in self.layers]}
