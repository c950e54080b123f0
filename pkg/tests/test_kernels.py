import numpy as np
import pytest

from ctabd import kernels
from ctabd.errors import ShapeError
from ctabd.kernels import get_backend
from oracles import conv3x3_nested_loops

BACKENDS = ["pure"]
try:
    get_backend("native")
    BACKENDS.append("native")
except ImportError:  # pragma: no cover - native build optional
    pass


@pytest.fixture(params=BACKENDS)
def backend(request):
    return get_backend(request.param)


def test_identity_kernel(backend, rng):
    x = rng.standard_normal((1, 2, 5, 4, 3)).astype(np.float32)
    w = np.zeros((2, 2, 3, 3, 3), np.float32)
    for c in range(2):
        w[c, c, 1, 1, 1] = 1.0
    y = backend.conv3x3_forward(x, w, np.zeros(2, np.float32))
    np.testing.assert_allclose(y, x, atol=1e-6)


def test_all_ones_kernel_constant_interior(backend):
    x = np.full((1, 1, 5, 5, 5), 2.0, np.float32)
    w = np.ones((1, 1, 3, 3, 3), np.float32)
    y = backend.conv3x3_forward(x, w, np.zeros(1, np.float32))
    assert y[0, 0, 2, 2, 2] == pytest.approx(27 * 2.0)


def test_forward_matches_nested_loop_oracle(backend, rng):
    x = rng.standard_normal((1, 1, 4, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3, 3))
    b = rng.standard_normal(1)
    y = backend.conv3x3_forward(x, w, b)
    ref = conv3x3_nested_loops(x, w, b)
    np.testing.assert_allclose(y, ref, atol=1e-6)


def test_forward_matches_oracle_multichannel(backend, rng):
    x = rng.standard_normal((2, 3, 4, 3, 5))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(
        backend.conv3x3_forward(x, w, b), conv3x3_nested_loops(x, w, b), atol=1e-6
    )


def test_linearity_without_bias(backend, rng):
    x = rng.standard_normal((1, 2, 6, 5, 4)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
    b = np.zeros(3, np.float32)
    y1 = backend.conv3x3_forward(x, w, b)
    y3 = backend.conv3x3_forward(3.0 * x, w, b)
    np.testing.assert_allclose(y3, 3.0 * y1, rtol=1e-5, atol=1e-5)


def test_channel_mismatch_rejected(backend, rng):
    x = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    w = rng.standard_normal((1, 3, 3, 3, 3)).astype(np.float32)
    with pytest.raises(ShapeError):
        backend.conv3x3_forward(x, w, np.zeros(1, np.float32))


def test_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("native backend not built")
    pure, native = get_backend("pure"), get_backend("native")
    for dtype, tol in ((np.float32, 2e-4), (np.float64, 1e-11)):
        x = rng.standard_normal((2, 5, 7, 6, 9)).astype(dtype)
        w = rng.standard_normal((4, 5, 3, 3, 3)).astype(dtype)
        b = rng.standard_normal(4).astype(dtype)
        gy = rng.standard_normal((2, 4, 7, 6, 9)).astype(dtype)
        fa = pure.conv3x3_forward(x, w, b)
        fb = native.conv3x3_forward(x, w, b)
        np.testing.assert_allclose(fa, fb, rtol=tol, atol=tol)
        ga = pure.conv3x3_grad_weights(x, gy)
        gb = native.conv3x3_grad_weights(x, gy)
        scale = max(1.0, float(np.abs(ga).max()))
        np.testing.assert_allclose(ga / scale, gb / scale, rtol=tol, atol=tol)


def test_grad_input_is_adjoint_of_forward(rng):
    # <conv(x), gy> == <x, grad_input(gy)> for a linear map (bias 0)
    x = rng.standard_normal((1, 3, 5, 4, 6))
    w = rng.standard_normal((2, 3, 3, 3, 3))
    gy = rng.standard_normal((1, 2, 5, 4, 6))
    y = kernels.conv3x3_forward(x, w, np.zeros(2))
    gx = kernels.conv3x3_grad_input(gy, w)
    lhs = float(np.sum(y * gy))
    rhs = float(np.sum(x * gx))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_odd_tiny_shapes(backend, rng):
    for shape in ((1, 1, 1, 1, 1), (1, 2, 1, 3, 2), (2, 1, 2, 1, 7)):
        x = rng.standard_normal(shape)
        w = rng.standard_normal((2,) + (shape[1], 3, 3, 3))
        b = rng.standard_normal(2)
        np.testing.assert_allclose(
            backend.conv3x3_forward(x, w, b), conv3x3_nested_loops(x, w, b), atol=1e-8
        )
