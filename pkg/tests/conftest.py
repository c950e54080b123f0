"""Shared test fixtures and the finite-difference gradient harness."""
from __future__ import annotations

import numpy as np
import pytest

FD_H = 1e-3
FD_TOL = 1e-4


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def fd_layer_check(layer, x, probes: int = 20, h: float = FD_H, tol: float = FD_TOL,
                   train: bool = True, seed: int = 0, check_params: bool = True) -> float:
    """Check one layer's backward pass against central finite differences.

    The scalar loss is sum(forward(x) * R) for a fixed random R; forward
    runs in float64 and the difference arithmetic is 64-bit throughout.
    Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    y = layer.forward(x, train=train)
    R = rng.standard_normal(y.shape)
    gx = layer.backward(R.copy())
    worst = 0.0
    for _ in range(probes):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        num = (float(np.sum(layer.forward(xp, train=train) * R))
               - float(np.sum(layer.forward(xm, train=train) * R))) / (2.0 * h)
        worst = max(worst, rel_err(num, float(gx[idx])))
    if check_params:
        layer.forward(x, train=train)
        for _, p in layer.params():
            p.zero_grad()
        layer.backward(R.copy())
        for _, p in layer.params():
            g = p.grad.copy()
            for _ in range(probes):
                idx = tuple(rng.integers(0, s) for s in p.data.shape)
                orig = p.data[idx]
                p.data[idx] = orig + h
                lp = float(np.sum(layer.forward(x, train=train) * R))
                p.data[idx] = orig - h
                lm = float(np.sum(layer.forward(x, train=train) * R))
                p.data[idx] = orig
                worst = max(worst, rel_err((lp - lm) / (2.0 * h), float(g[idx])))
    assert worst <= tol, f"finite-difference mismatch: worst relative error {worst:.3e}"
    return worst


def fd_loss_check(loss_grad_fn, x, probes: int = 20, h: float = FD_H, tol: float = FD_TOL,
                  seed: int = 0) -> float:
    """Check a (loss, grad) function of one array against finite differences."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    _, grad = loss_grad_fn(x)
    worst = 0.0
    for _ in range(probes):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        num = (loss_grad_fn(xp)[0] - loss_grad_fn(xm)[0]) / (2.0 * h)
        worst = max(worst, rel_err(num, float(grad[idx])))
    assert worst <= tol, f"finite-difference mismatch: worst relative error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
