"""Forward/backward layer implementations.

Every layer caches its forward inputs and raises ``StateError`` when
``backward`` runs without a preceding ``forward``. Parameter gradients
accumulate into ``DiffTensor.grad``; ``backward`` returns the input
gradient. Activations are plain numpy arrays shaped (batch, channel,
x, y, z) unless noted.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import ShapeError, StateError
from .. import kernels
from .tensor import DiffTensor


def _sum64(a: np.ndarray, axis) -> np.ndarray:
    # reductions accumulate in 64-bit regardless of the compute dtype
    return np.sum(a, axis=axis, dtype=np.float64).astype(a.dtype)


class Layer:
    """Base class: parameter iteration and cache bookkeeping."""

    def params(self):
        for name in getattr(self, "_param_names", ()):
            yield name, getattr(self, name)

    def buffers(self):
        for name in getattr(self, "_buffer_names", ()):
            yield name, getattr(self, name)

    def _need_cache(self, name="_cache"):
        cache = getattr(self, name, None)
        if cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return cache


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv3d(Layer):
    """3x3x3 same-padding correlation with stride 1."""

    _param_names = ("weight", "bias")

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.weight = DiffTensor(he_normal(rng, (out_ch, in_ch, 3, 3, 3), in_ch * 27, dtype))
        self.bias = DiffTensor(np.zeros(out_ch, dtype))
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        self._cache = x
        return kernels.conv3x3_forward(x, self.weight.data, self.bias.data)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        x = self._need_cache()
        self.weight.grad += kernels.conv3x3_grad_weights(x, gy)
        self.bias.grad += _sum64(gy, axis=(0, 2, 3, 4))
        return kernels.conv3x3_grad_input(gy, self.weight.data)


class PointwiseConv3d(Layer):
    """1x1x1 convolution (pure channel mixing); used for class heads."""

    _param_names = ("weight", "bias")

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.weight = DiffTensor(he_normal(rng, (out_ch, in_ch), in_ch, dtype))
        self.bias = DiffTensor(np.zeros(out_ch, dtype))
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        self._cache = x
        y = np.einsum("oi,nixyz->noxyz", self.weight.data, x, optimize=True)
        y += self.bias.data.reshape(1, -1, 1, 1, 1)
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        x = self._need_cache()
        self.weight.grad += np.einsum("noxyz,nixyz->oi", gy, x, optimize=True)
        self.bias.grad += _sum64(gy, axis=(0, 2, 3, 4))
        return np.einsum("oi,noxyz->nixyz", self.weight.data, gy, optimize=True)


class BatchNorm3d(Layer):
    """Per-channel batch normalization with running statistics."""

    _param_names = ("gamma", "beta")
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.9, dtype=np.float32):
        self.ch = ch
        self.eps = eps
        self.momentum = momentum
        self.gamma = DiffTensor(np.ones(ch, dtype))
        self.beta = DiffTensor(np.zeros(ch, dtype))
        self.running_mean = np.zeros(ch, dtype)
        self.running_var = np.ones(ch, dtype)
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.shape[1] != self.ch:
            raise ShapeError(f"expected {self.ch} channels, got {x.shape[1]}")
        axes = (0, 2, 3, 4)
        if train:
            mean = np.mean(x, axis=axes, dtype=np.float64)
            var = np.mean((x - mean.reshape(1, -1, 1, 1, 1)) ** 2, axis=axes, dtype=np.float64)
            mean = mean.astype(x.dtype)
            var = var.astype(x.dtype)
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1, 1)) * inv_std.reshape(1, -1, 1, 1, 1)
        self._cache = (xhat, inv_std, train)
        return self.gamma.data.reshape(1, -1, 1, 1, 1) * xhat + self.beta.data.reshape(1, -1, 1, 1, 1)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        xhat, inv_std, train = self._need_cache()
        axes = (0, 2, 3, 4)
        self.gamma.grad += _sum64(gy * xhat, axes)
        self.beta.grad += _sum64(gy, axes)
        g = self.gamma.data.reshape(1, -1, 1, 1, 1)
        if not train:
            return gy * g * inv_std.reshape(1, -1, 1, 1, 1)
        n = gy.shape[0] * gy.shape[2] * gy.shape[3] * gy.shape[4]
        gyg = gy * g
        sum_gyg = np.sum(gyg, axis=axes, dtype=np.float64).reshape(1, -1, 1, 1, 1)
        sum_gyg_xhat = np.sum(gyg * xhat, axis=axes, dtype=np.float64).reshape(1, -1, 1, 1, 1)
        gx = (gyg - (sum_gyg + xhat * sum_gyg_xhat) / n) * inv_std.reshape(1, -1, 1, 1, 1)
        return gx.astype(gy.dtype, copy=False)


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        mask = self._need_cache()
        return np.where(mask, gy, 0)


class MaxPool3d(Layer):
    """2x2x2 max pooling with stride 2; spatial dims must be even."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        n, c, X, Y, Z = x.shape
        if X % 2 or Y % 2 or Z % 2:
            raise ShapeError(f"pooling needs even spatial dims, got {(X, Y, Z)}")
        blocks = x.reshape(n, c, X // 2, 2, Y // 2, 2, Z // 2, 2)
        flat = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, X // 2, Y // 2, Z // 2, 8)
        arg = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (arg, x.shape)
        return out

    def backward(self, gy: np.ndarray) -> np.ndarray:
        arg, shape = self._need_cache()
        n, c, X, Y, Z = shape
        flat = np.zeros((n, c, X // 2, Y // 2, Z // 2, 8), gy.dtype)
        np.put_along_axis(flat, arg[..., None], gy[..., None], axis=-1)
        blocks = flat.reshape(n, c, X // 2, Y // 2, Z // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return np.ascontiguousarray(blocks.reshape(n, c, X, Y, Z))


@lru_cache(maxsize=64)
def _upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) interpolation matrix for x2 upsampling with half-pixel centers."""
    out = np.zeros((2 * n, n), dtype=np.float64)
    for j in range(2 * n):
        c = min(max((j + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(c))
        i1 = min(i0 + 1, n - 1)
        f = c - i0
        out[j, i0] += 1.0 - f
        out[j, i1] += f
    return out


def _apply_axis_matrix(a: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(a, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    res = mat.astype(a.dtype) @ flat
    return np.moveaxis(res.reshape((mat.shape[0],) + moved.shape[1:]), 0, axis)


class UpsampleTrilinear2x(Layer):
    """Trilinear x2 upsampling; the backward pass is the exact adjoint."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        self._cache = x.shape
        out = x
        for axis in (2, 3, 4):
            out = _apply_axis_matrix(out, _upsample_matrix(out.shape[axis]), axis)
        return out

    def backward(self, gy: np.ndarray) -> np.ndarray:
        shape = self._need_cache()
        gx = gy
        for axis in (2, 3, 4):
            gx = _apply_axis_matrix(gx, _upsample_matrix(shape[axis]).T, axis)
        return np.ascontiguousarray(gx)


class Dropout(Layer):
    """Inverted-scaling dropout with a dedicated seeded stream."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._cache = None
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype)
        keep /= np.asarray(1.0 - self.rate, dtype=x.dtype)
        self._cache = keep
        return x * keep

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            return gy
        return gy * self._cache


class Linear(Layer):
    """Fully connected layer over (batch, features)."""

    _param_names = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.in_features = in_features
        self.weight = DiffTensor(he_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = DiffTensor(np.zeros(out_features, dtype))
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected (batch, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, gy: np.ndarray) -> np.ndarray:
        x = self._need_cache()
        self.weight.grad += gy.T @ x
        self.bias.grad += _sum64(gy, axis=0)
        return gy @ self.weight.data
