"""Numpy implementation of the convolution kernels.

Works tap by tap: a 3x3x3 correlation is 27 channel-mixing GEMMs over
shifted views of the zero-padded input. Accumulation order over taps is
fixed, so results are deterministic.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def _check(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"expected 5-D input and weights, got {x.ndim}-D and {w.ndim}-D")
    if w.shape[2:] != (3, 3, 3):
        raise ShapeError(f"kernel spatial dims must be 3x3x3, got {w.shape[2:]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input channels {x.shape[1]} do not match weights {w.shape[1]}")


def _pad1(x: np.ndarray) -> np.ndarray:
    n, c, X, Y, Z = x.shape
    xp = np.zeros((n, c, X + 2, Y + 2, Z + 2), x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(x, w)
    n, _, X, Y, Z = x.shape
    co = w.shape[0]
    xp = _pad1(x)
    y = np.empty((n, co, X, Y, Z), x.dtype)
    y[:] = b.reshape(1, co, 1, 1, 1)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                view = xp[:, :, dx : dx + X, dy : dy + Y, dz : dz + Z]
                y += np.einsum("oi,nixyz->noxyz", w[:, :, dx, dy, dz], view, optimize=True)
    return y


def conv3x3_grad_weights(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    if x.shape[0] != gy.shape[0] or x.shape[2:] != gy.shape[2:]:
        raise ShapeError(f"input {x.shape} and output grad {gy.shape} do not align")
    _, _, X, Y, Z = x.shape
    xp = _pad1(x)
    gw = np.empty((gy.shape[1], x.shape[1], 3, 3, 3), x.dtype)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                view = xp[:, :, dx : dx + X, dy : dy + Y, dz : dz + Z]
                gw[:, :, dx, dy, dz] = np.einsum("noxyz,nixyz->oi", gy, view, optimize=True)
    return gw
