"""Hot convolution kernels with a compiled core and a numpy fallback.

The 3x3x3 same-padding correlation dominates training time, so it is
implemented twice: ``_native`` (Cython, built at install time) and ``pure``
(numpy, always available). The backend is chosen at import time; set
``CTABD_KERNELS=pure`` or ``CTABD_KERNELS=native`` to force one,
``auto`` (default) prefers the compiled core.

All functions take C-contiguous arrays shaped (batch, channel, x, y, z) in
float32 or float64. The input gradient reuses the forward kernel: a
same-padded correlation's adjoint is the same correlation with the kernel
flipped and in/out channels swapped.
"""
from __future__ import annotations

import os

import numpy as np

_requested = os.environ.get("CTABD_KERNELS", "auto")
if _requested not in {"auto", "native", "pure"}:
    raise ValueError(f"CTABD_KERNELS must be auto, native, or pure, not {_requested!r}")

if _requested in ("auto", "native"):
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:
        if _requested == "native":
            raise
        from . import pure as _impl

        BACKEND = "pure"
else:
    from . import pure as _impl

    BACKEND = "pure"


def get_backend(name: str | None = None):
    """Return a kernel module by name (for benchmarks and parity tests)."""
    if name in (None, "active"):
        return _impl
    if name == "pure":
        from . import pure

        return pure
    if name == "native":
        from . import _native

        return _native
    raise ValueError(f"unknown backend {name!r}")


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padding 3x3x3 correlation: (n,ci,X,Y,Z) -> (n,co,X,Y,Z)."""
    return _impl.conv3x3_forward(x, w, b)


def conv3x3_grad_weights(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Weight gradient of the correlation, shaped like w: (co,ci,3,3,3)."""
    return _impl.conv3x3_grad_weights(x, gy)


def flip_transpose_weights(w: np.ndarray) -> np.ndarray:
    """Adjoint weights: swap in/out channels and mirror all three taps."""
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])


def conv3x3_grad_input(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Input gradient of the correlation: (n,co,X,Y,Z) -> (n,ci,X,Y,Z)."""
    wt = flip_transpose_weights(w)
    zero_bias = np.zeros(wt.shape[0], dtype=gy.dtype)
    return _impl.conv3x3_forward(gy, wt, zero_bias)
