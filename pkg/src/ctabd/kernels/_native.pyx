# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled 3x3x3 correlation kernels (float32/float64).

The forward pass fuses the three z taps and accumulates a z strip in a
stack buffer so the output row is stored once per strip instead of once
per tap. Loops are plain C with a fixed order, so results are
deterministic and independent of threading.
"""
import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def _check(x, w):
    from ..errors import ShapeError

    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"expected 5-D input and weights, got {x.ndim}-D and {w.ndim}-D")
    if w.shape[2:] != (3, 3, 3):
        raise ShapeError(f"kernel spatial dims must be 3x3x3, got {w.shape[2:]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input channels {x.shape[1]} do not match weights {w.shape[1]}")


cdef void _fwd(const real[:, :, :, :, ::1] xp, const real[:, :, :, :, ::1] w,
               real[:, :, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], co = out.shape[1]
    cdef Py_ssize_t X = out.shape[2], Y = out.shape[3], Z = out.shape[4]
    cdef Py_ssize_t ci = xp.shape[1]
    cdef Py_ssize_t b, o, i, dx, dy, px, py, pz0, k, nk
    cdef real w0, w1, w2
    cdef real acc[16]
    cdef real* op
    cdef const real* ip
    for b in range(n):
        for o in range(co):
            for px in range(X):
                for py in range(Y):
                    op = &out[b, o, px, py, 0]
                    pz0 = 0
                    while pz0 + 16 <= Z:
                        for k in range(16):
                            acc[k] = op[pz0 + k]
                        for i in range(ci):
                            for dx in range(3):
                                for dy in range(3):
                                    w0 = w[o, i, dx, dy, 0]
                                    w1 = w[o, i, dx, dy, 1]
                                    w2 = w[o, i, dx, dy, 2]
                                    ip = &xp[b, i, px + dx, py + dy, pz0]
                                    for k in range(16):
                                        acc[k] += w0 * ip[k] + w1 * ip[k + 1] + w2 * ip[k + 2]
                        for k in range(16):
                            op[pz0 + k] = acc[k]
                        pz0 += 16
                    while pz0 + 4 <= Z:
                        for k in range(4):
                            acc[k] = op[pz0 + k]
                        for i in range(ci):
                            for dx in range(3):
                                for dy in range(3):
                                    w0 = w[o, i, dx, dy, 0]
                                    w1 = w[o, i, dx, dy, 1]
                                    w2 = w[o, i, dx, dy, 2]
                                    ip = &xp[b, i, px + dx, py + dy, pz0]
                                    for k in range(4):
                                        acc[k] += w0 * ip[k] + w1 * ip[k + 1] + w2 * ip[k + 2]
                        for k in range(4):
                            op[pz0 + k] = acc[k]
                        pz0 += 4
                    while pz0 < Z:
                        acc[0] = op[pz0]
                        for i in range(ci):
                            for dx in range(3):
                                for dy in range(3):
                                    ip = &xp[b, i, px + dx, py + dy, pz0]
                                    acc[0] += (w[o, i, dx, dy, 0] * ip[0]
                                               + w[o, i, dx, dy, 1] * ip[1]
                                               + w[o, i, dx, dy, 2] * ip[2])
                        op[pz0] = acc[0]
                        pz0 += 1


cdef void _gradw(const real[:, :, :, :, ::1] xp, const real[:, :, :, :, ::1] gy,
                 real[:, :, :, :, ::1] gw) noexcept nogil:
    # lane-indexed accumulators keep the reduction vectorizable without
    # floating-point reassociation; the lane-merge order is fixed, so the
    # result is deterministic
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t X = gy.shape[2], Y = gy.shape[3], Z = gy.shape[4]
    cdef Py_ssize_t ci = xp.shape[1]
    cdef Py_ssize_t b, o, i, dx, dy, px, py, pz0, k
    cdef real s0, s1, s2, g
    cdef real t0[16]
    cdef real t1[16]
    cdef real t2[16]
    cdef const real* gp
    cdef const real* ip
    for o in range(co):
        for i in range(ci):
            for dx in range(3):
                for dy in range(3):
                    for k in range(16):
                        t0[k] = 0
                        t1[k] = 0
                        t2[k] = 0
                    for b in range(n):
                        for px in range(X):
                            for py in range(Y):
                                gp = &gy[b, o, px, py, 0]
                                ip = &xp[b, i, px + dx, py + dy, 0]
                                pz0 = 0
                                while pz0 + 16 <= Z:
                                    for k in range(16):
                                        g = gp[pz0 + k]
                                        t0[k] += g * ip[pz0 + k]
                                        t1[k] += g * ip[pz0 + k + 1]
                                        t2[k] += g * ip[pz0 + k + 2]
                                    pz0 += 16
                                while pz0 < Z:
                                    g = gp[pz0]
                                    t0[0] += g * ip[pz0]
                                    t1[0] += g * ip[pz0 + 1]
                                    t2[0] += g * ip[pz0 + 2]
                                    pz0 += 1
                    s0 = 0
                    s1 = 0
                    s2 = 0
                    for k in range(16):
                        s0 += t0[k]
                        s1 += t1[k]
                        s2 += t2[k]
                    gw[o, i, dx, dy, 0] = s0
                    gw[o, i, dx, dy, 1] = s1
                    gw[o, i, dx, dy, 2] = s2


def _pad1(x):
    n, c, X, Y, Z = x.shape
    xp = np.zeros((n, c, X + 2, Y + 2, Z + 2), x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


def conv3x3_forward(x, w, b):
    _check(x, w)
    n, _, X, Y, Z = x.shape
    co = w.shape[0]
    xp = _pad1(np.ascontiguousarray(x))
    w = np.ascontiguousarray(w, dtype=x.dtype)
    out = np.empty((n, co, X, Y, Z), x.dtype)
    out[:] = np.asarray(b, dtype=x.dtype).reshape(1, co, 1, 1, 1)
    if x.dtype == np.float32:
        _fwd[float](xp, w, out)
    elif x.dtype == np.float64:
        _fwd[double](xp, w, out)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out


def conv3x3_grad_weights(x, gy):
    from ..errors import ShapeError

    if x.shape[0] != gy.shape[0] or x.shape[2:] != gy.shape[2:]:
        raise ShapeError(f"input {x.shape} and output grad {gy.shape} do not align")
    xp = _pad1(np.ascontiguousarray(x))
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    gw = np.empty((gy.shape[1], x.shape[1], 3, 3, 3), x.dtype)
    if x.dtype == np.float32:
        _gradw[float](xp, gy, gw)
    elif x.dtype == np.float64:
        _gradw[double](xp, gy, gw)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return gw
