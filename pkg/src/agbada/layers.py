"""Layer nodes with layer-local forward/backward passes.

Each layer owns its parameters, gradients and forward cache. ``backward``
fills ``grads`` only when the layer is trainable; frozen layers still hand
the input gradient down.
"""
from __future__ import annotations

import math
from typing import ClassVar

import numpy as np
from numba import njit

from .errors import DimensionError, ParameterError, StateError
from .tensor import Rng, col2im_batch, conv_output_size, im2col_batch, matmul

__all__ = [
    "Layer", "Conv2D", "MaxPool2D", "Flatten", "Dense", "Dropout",
    "ReLU", "Sigmoid", "Softmax", "activation_apply", "dropout_apply",
]

# cap on im2col buffer size per chunk of images (elements)
_MAX_COL_ELEMENTS = 1 << 24


class Layer:
    kind: ClassVar[str] = "Layer"

    def __init__(self, name: str, trainable: bool = True):
        self.name = name
        self.trainable = trainable
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None

    # --- structure -------------------------------------------------------
    @property
    def config(self) -> dict:
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(in_shape)

    def init_params(self, rng: Rng) -> None:
        pass

    @property
    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def astype(self, dtype) -> None:
        for k, v in self.params.items():
            self.params[k] = v.astype(dtype)
        self.grads.clear()
        self.cache = None

    # --- passes ----------------------------------------------------------
    def forward(self, x: np.ndarray, training: bool = False, rng: Rng | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        raise NotImplementedError

    def _require_cache(self):
        if self.cache is None:
            raise StateError(f"{self.name}: backward called before a training forward pass")
        return self.cache

    def __repr__(self) -> str:
        cfg = ", ".join(f"{k}={v!r}" for k, v in self.config.items())
        return f"{self.kind}({self.name!r}{', ' if cfg else ''}{cfg})"


class Conv2D(Layer):
    """3-D cross-correlation computed as im2col + matmul, optional fused ReLU.

    ``pad="same"`` keeps H x W for odd kernels at stride 1.
    """
    kind = "Conv2D"

    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1,
                 pad="same", activation: str | None = "relu", trainable=True):
        super().__init__(name, trainable)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        if pad == "same":
            self.pad = (self.kernel[0] // 2, self.kernel[1] // 2)
        else:
            self.pad = (pad, pad) if isinstance(pad, int) else tuple(pad)
        if activation not in (None, "relu"):
            raise ParameterError(f"unsupported fused activation {activation!r}")
        self.activation = activation
        kh, kw = self.kernel
        self.params["W"] = np.zeros((self.out_channels, self.in_channels, kh, kw), np.float32)
        self.params["b"] = np.zeros(self.out_channels, np.float32)

    @property
    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad,
                "activation": self.activation}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(
                f"{self.name}: expected ({self.in_channels}, H, W) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = conv_output_size(h, self.kernel[0], self.stride[0], self.pad[0])
        wo = conv_output_size(w, self.kernel[1], self.stride[1], self.pad[1])
        if ho < 1 or wo < 1:
            raise DimensionError(f"{self.name}: kernel larger than padded input {tuple(in_shape)}")
        return (self.out_channels, ho, wo)

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel[0] * self.kernel[1]
        std = math.sqrt(2.0 / fan_in)
        w = self.params["W"]
        self.params["W"] = (rng.normal(w.size) * std).astype(w.dtype).reshape(w.shape)
        self.params["b"] = np.zeros_like(self.params["b"])

    def _chunks(self, n, h, w):
        ho, wo = self.output_shape((self.in_channels, h, w))[1:]
        per_image = self.in_channels * self.kernel[0] * self.kernel[1] * ho * wo
        step = max(1, _MAX_COL_ELEMENTS // max(per_image, 1))
        return [(s, min(n, s + step)) for s in range(0, n, step)], ho, wo

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"{self.name}: expected [N, {self.in_channels}, H, W] input, got {x.shape}")
        W, b = self.params["W"], self.params["b"]
        x = np.ascontiguousarray(x, dtype=W.dtype)
        n, _, h, w = x.shape
        chunks, ho, wo = self._chunks(n, h, w)
        wmat = W.reshape(self.out_channels, -1)
        y = np.empty((n, self.out_channels, ho, wo), dtype=W.dtype)
        for s, e in chunks:
            cols = im2col_batch(x[s:e], self.kernel, self.stride, self.pad)
            ymat = matmul(wmat, cols) + b[:, None]
            y[s:e] = ymat.reshape(self.out_channels, e - s, ho, wo).transpose(1, 0, 2, 3)
        if self.activation == "relu":
            y = np.maximum(y, 0, out=y)
        self.cache = (x, y) if training else None
        return y

    def backward(self, dy, need_dx=True):
        x, y = self._require_cache()
        if dy.shape != y.shape:
            raise DimensionError(f"{self.name}: upstream gradient {dy.shape} != output {y.shape}")
        if self.activation == "relu":
            dy = dy * (y > 0)
        W = self.params["W"]
        dy = dy.astype(W.dtype, copy=False)
        n, _, h, w = x.shape
        chunks, ho, wo = self._chunks(n, h, w)
        wmat_t = np.ascontiguousarray(W.reshape(self.out_channels, -1).T)
        dW = np.zeros((self.out_channels, wmat_t.shape[0]), dtype=W.dtype) if self.trainable else None
        dx = np.empty(x.shape, dtype=W.dtype) if need_dx else None
        for s, e in chunks:
            dymat = np.ascontiguousarray(dy[s:e].transpose(1, 0, 2, 3)).reshape(self.out_channels, -1)
            if self.trainable:
                cols = im2col_batch(x[s:e], self.kernel, self.stride, self.pad)
                dW += matmul(dymat, cols.T)
            if need_dx:
                dcols = matmul(wmat_t, dymat)
                dx[s:e] = col2im_batch(dcols, (e - s, *x.shape[1:]), self.kernel, self.stride, self.pad)
        if self.trainable:
            self.grads["W"] = dW.reshape(W.shape)
            self.grads["b"] = dy.sum(axis=(0, 2, 3))
        return dx


@njit(cache=True)
def _maxpool_fwd(x, out, arg):
    n_img, c_in, ho, wo = out.shape
    for n in range(n_img):
        for c in range(c_in):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[n, c, 2 * oy, 2 * ox]
                    pos = 0
                    for q in range(1, 4):
                        v = x[n, c, 2 * oy + q // 2, 2 * ox + q % 2]
                        if v > best:
                            best = v
                            pos = q
                    out[n, c, oy, ox] = best
                    arg[n, c, oy, ox] = pos


@njit(cache=True)
def _maxpool_bwd(dy, arg, dx):
    n_img, c_in, ho, wo = dy.shape
    for n in range(n_img):
        for c in range(c_in):
            for oy in range(ho):
                for ox in range(wo):
                    q = arg[n, c, oy, ox]
                    dx[n, c, 2 * oy + q // 2, 2 * ox + q % 2] = dy[n, c, oy, ox]


class MaxPool2D(Layer):
    """2x2 / stride-2 max pooling; an odd trailing row or column is dropped."""
    kind = "MaxPool2D"

    @property
    def config(self):
        return {"pool": (2, 2), "stride": (2, 2)}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise DimensionError(f"{self.name}: cannot 2x2-pool input of shape {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise DimensionError(f"{self.name}: expected [N, C, H, W], got {x.shape}")
        c, ho, wo = self.output_shape(x.shape[1:])
        x = np.ascontiguousarray(x)
        out = np.empty((x.shape[0], c, ho, wo), dtype=x.dtype)
        arg = np.empty(out.shape, dtype=np.int8)
        _maxpool_fwd(x, out, arg)
        self.cache = (x.shape, arg) if training else None
        return out

    def backward(self, dy, need_dx=True):
        shape, arg = self._require_cache()
        if dy.shape != arg.shape:
            raise DimensionError(f"{self.name}: upstream gradient {dy.shape} != output {arg.shape}")
        if not need_dx:
            return None
        dx = np.zeros(shape, dtype=dy.dtype)
        _maxpool_bwd(np.ascontiguousarray(dy), arg, dx)
        return dx


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training=False, rng=None):
        self.cache = x.shape if training else None
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, need_dx=True):
        shape = self._require_cache()
        return dy.reshape(shape) if need_dx else None


class Dense(Layer):
    """``y = x @ W.T + b`` with ``W`` of shape (out, in)."""
    kind = "Dense"

    def __init__(self, name, in_features, out_features, trainable=True):
        super().__init__(name, trainable)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.params["W"] = np.zeros((self.out_features, self.in_features), np.float32)
        self.params["b"] = np.zeros(self.out_features, np.float32)

    @property
    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise DimensionError(
                f"{self.name}: expected ({self.in_features},) input, got {tuple(in_shape)}")
        return (self.out_features,)

    def init_params(self, rng):
        std = math.sqrt(2.0 / self.in_features)
        w = self.params["W"]
        self.params["W"] = (rng.normal(w.size) * std).astype(w.dtype).reshape(w.shape)
        self.params["b"] = np.zeros_like(self.params["b"])

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"{self.name}: expected [N, {self.in_features}] input, got {x.shape}")
        W = self.params["W"]
        x = x.astype(W.dtype, copy=False)
        self.cache = x if training else None
        return matmul(x, W.T) + self.params["b"]

    def backward(self, dy, need_dx=True):
        x = self._require_cache()
        if dy.shape != (x.shape[0], self.out_features):
            raise DimensionError(f"{self.name}: upstream gradient has shape {dy.shape}")
        W = self.params["W"]
        dy = dy.astype(W.dtype, copy=False)
        if self.trainable:
            self.grads["W"] = matmul(dy.T, x)
            self.grads["b"] = dy.sum(axis=0)
        return matmul(dy, W) if need_dx else None


def dropout_apply(x: np.ndarray, rate: float, training: bool, rng: Rng | None = None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise StateError("training-mode dropout needs an Rng")
    keep = rng.bernoulli_keep(x.shape, rate)
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, name, rate=0.5):
        super().__init__(name, trainable=True)
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    @property
    def config(self):
        return {"rate": self.rate}

    def forward(self, x, training=False, rng=None):
        y, mask = dropout_apply(x, self.rate, training, rng)
        self.cache = (mask,) if training else None
        return y

    def backward(self, dy, need_dx=True):
        (mask,) = self._require_cache()
        if not need_dx:
            return None
        return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the open interval (0, 1) even where the float format saturates
    tiny = np.finfo(x.dtype).tiny
    return np.clip(out, tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)), out=out)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


_FORWARD = {
    "relu": lambda x: np.maximum(x, 0),
    "sigmoid": _sigmoid,
    "softmax": _softmax,
}


def _activation_backward(kind, x, y, dy):
    if kind == "relu":
        return dy * (x > 0)
    if kind == "sigmoid":
        return dy * y * (1 - y)
    # softmax: J^T dy with J = diag(y) - y y^T, row-wise
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def activation_apply(kind: str, x: np.ndarray, direction: str = "forward",
                     dy: np.ndarray | None = None) -> np.ndarray:
    """Stateless activation. For ``direction="backward"``, ``x`` is the
    forward input and ``dy`` the upstream gradient."""
    kind = kind.lower()
    if kind not in _FORWARD:
        raise ParameterError(f"unknown activation {kind!r}")
    y = _FORWARD[kind](x)
    if direction == "forward":
        return y
    if direction != "backward":
        raise ParameterError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if dy is None or dy.shape != x.shape:
        raise DimensionError("activation backward needs dy shaped like x")
    return _activation_backward(kind, x, y, dy)


class _Activation(Layer):
    fn: ClassVar[str]

    def __init__(self, name):
        super().__init__(name, trainable=True)

    def forward(self, x, training=False, rng=None):
        y = _FORWARD[self.fn](x)
        self.cache = (x, y) if training else None
        return y

    def backward(self, dy, need_dx=True):
        x, y = self._require_cache()
        return _activation_backward(self.fn, x, y, dy) if need_dx else None


class ReLU(_Activation):
    kind, fn = "ReLU", "relu"


class Sigmoid(_Activation):
    kind, fn = "Sigmoid", "sigmoid"


class Softmax(_Activation):
    kind, fn = "Softmax", "softmax"
