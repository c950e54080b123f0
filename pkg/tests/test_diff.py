import numpy as np
import pytest

from conftest import fd_layer_check
from ctabd.diff import (
    AdamConfig,
    AdamOptimizer,
    AdamState,
    BatchNorm3d,
    Conv3d,
    CosineAnnealing,
    DiffTensor,
    Dropout,
    FixedLr,
    Linear,
    MaxPool3d,
    PointwiseConv3d,
    ReLU,
    StepDecay,
    UpsampleTrilinear2x,
    adam_step,
    component_rng,
    load_checkpoint,
    save_checkpoint,
    schedule_lr,
)
from ctabd.errors import ParameterError, ShapeError, StateError


@pytest.fixture
def init_rng():
    return component_rng(42, "tests", "init")


def _x(rng, shape=(2, 3, 4, 6, 4)):
    return rng.standard_normal(shape)


# -- gradient checks (float64, 20+ probes each) -------------------------------

def test_conv3d_gradients(rng, init_rng):
    fd_layer_check(Conv3d(3, 4, init_rng, dtype=np.float64), _x(rng))


def test_pointwise_conv_gradients(rng, init_rng):
    fd_layer_check(PointwiseConv3d(3, 5, init_rng, dtype=np.float64), _x(rng))


def test_batchnorm_train_gradients(rng):
    fd_layer_check(BatchNorm3d(3, dtype=np.float64), _x(rng))


def test_batchnorm_eval_gradients(rng):
    bn = BatchNorm3d(3, dtype=np.float64)
    bn.forward(_x(rng), train=True)  # populate running stats
    fd_layer_check(bn, _x(rng, (2, 3, 2, 2, 2)), train=False)


def test_relu_gradients(rng):
    x = _x(rng)
    x[np.abs(x) < 0.05] += 0.1  # keep probes away from the kink
    fd_layer_check(ReLU(), x)


def test_maxpool_gradients(rng):
    fd_layer_check(MaxPool3d(), _x(rng, (2, 2, 4, 4, 4)))


def test_upsample_gradients(rng):
    fd_layer_check(UpsampleTrilinear2x(), _x(rng, (1, 2, 3, 4, 2)))


def test_linear_gradients(rng, init_rng):
    fd_layer_check(Linear(7, 3, init_rng, dtype=np.float64), rng.standard_normal((5, 7)))


def test_dropout_eval_gradients(rng):
    drop = Dropout(0.4, component_rng(0, "d"))
    fd_layer_check(drop, _x(rng), train=False, check_params=False)


# -- forward semantics ---------------------------------------------------------

def test_relu_values():
    r = ReLU()
    out = r.forward(np.array([[[[[-1.0, 2.0]]]]]))
    np.testing.assert_array_equal(out, [[[[[0.0, 2.0]]]]])


def test_maxpool_constant():
    p = MaxPool3d()
    out = p.forward(np.full((1, 1, 4, 4, 4), 3.5))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2, 2), 3.5))


def test_maxpool_needs_even_dims(rng):
    with pytest.raises(ShapeError):
        MaxPool3d().forward(rng.standard_normal((1, 1, 3, 4, 4)))


def test_upsample_doubles_dims_and_preserves_constants():
    up = UpsampleTrilinear2x()
    out = up.forward(np.full((1, 1, 2, 3, 4), 1.25))
    assert out.shape == (1, 1, 4, 6, 8)
    np.testing.assert_allclose(out, 1.25)


def test_dropout_eval_is_identity(rng):
    x = _x(rng)
    drop = Dropout(0.5, component_rng(0, "d2"))
    np.testing.assert_array_equal(drop.forward(x, train=False), x)


def test_dropout_inverted_scaling(rng):
    x = np.ones((1, 1, 20, 20, 20))
    drop = Dropout(0.25, component_rng(3, "d3"))
    out = drop.forward(x, train=True)
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75)
    assert abs((out != 0).mean() - 0.75) < 0.05


def test_dropout_masks_reproducible():
    x = np.ones((1, 1, 8, 8, 8))
    a = Dropout(0.5, component_rng(9, "mask")).forward(x, train=True)
    b = Dropout(0.5, component_rng(9, "mask")).forward(x, train=True)
    np.testing.assert_array_equal(a, b)


def test_batchnorm_standardized_passthrough(rng):
    x = rng.standard_normal((4, 2, 6, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3, 4), keepdims=True)) / x.std(axis=(0, 2, 3, 4), keepdims=True)
    bn = BatchNorm3d(2, dtype=np.float64)
    out = bn.forward(x, train=True)
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=1e-5)


def test_batchnorm_normalizes_batch(rng):
    bn = BatchNorm3d(3, dtype=np.float64)
    out = bn.forward(rng.standard_normal((2, 3, 5, 5, 5)) * 7 + 3, train=True)
    assert np.abs(out.mean(axis=(0, 2, 3, 4))).max() < 1e-4
    assert np.abs(out.var(axis=(0, 2, 3, 4)) - 1).max() < 1e-4


def test_backward_before_forward_raises(rng, init_rng):
    layer = Conv3d(2, 2, init_rng)
    with pytest.raises(StateError):
        layer.backward(rng.standard_normal((1, 2, 4, 4, 4)))


def test_zero_upstream_gradient_gives_zero(rng, init_rng):
    layer = Conv3d(2, 3, init_rng, dtype=np.float64)
    x = _x(rng, (1, 2, 4, 4, 4))
    layer.forward(x)
    gx = layer.backward(np.zeros((1, 3, 4, 4, 4)))
    assert not gx.any()
    assert not layer.weight.grad.any() and not layer.bias.grad.any()


def test_bias_gradient_is_upstream_sum(rng, init_rng):
    layer = Conv3d(2, 3, init_rng, dtype=np.float64)
    x = _x(rng, (2, 2, 3, 3, 3))
    layer.forward(x)
    gy = rng.standard_normal((2, 3, 3, 3, 3))
    layer.backward(gy)
    np.testing.assert_allclose(layer.bias.grad, gy.sum(axis=(0, 2, 3, 4)), rtol=1e-12)


# -- optimizer and schedules ----------------------------------------------------

def test_adam_first_step_closed_form():
    w = np.array([1.0])
    state = AdamState.zeros_like(w)
    new_w, state = adam_step(w, np.array([0.5]), state, AdamConfig(), lr=0.001)
    assert state.t == 1
    np.testing.assert_allclose(state.m, [0.05])
    np.testing.assert_allclose(state.v, [2.5e-4])
    assert new_w[0] == pytest.approx(1.0 - 0.001 * 0.5 / (0.5 + 1e-8), abs=1e-9)


def test_adam_zero_gradient_no_change():
    w = np.array([2.0, -3.0])
    state = AdamState.zeros_like(w)
    new_w, _ = adam_step(w, np.zeros(2), state, AdamConfig(), lr=0.1)
    np.testing.assert_array_equal(new_w, w)


def test_adam_step_bound(rng):
    cfg = AdamConfig()
    for _ in range(20):
        w = rng.standard_normal(5)
        g = rng.standard_normal(5) * 10.0 ** float(rng.integers(-3, 4))
        new_w, _ = adam_step(w, g, AdamState.zeros_like(w), cfg, lr=0.01)
        assert np.all(np.abs(new_w - w) <= 0.01 * (1 + 1e-6))


def test_adam_config_validation():
    with pytest.raises(ParameterError):
        AdamConfig(beta1=1.0)
    with pytest.raises(ParameterError):
        AdamConfig(beta2=0.0)


def test_cosine_schedule_endpoints():
    s = CosineAnnealing(0.01, 10, 0.0)
    assert schedule_lr(s, 0) == pytest.approx(0.01)
    assert schedule_lr(s, 10) == pytest.approx(0.0, abs=1e-12)
    assert schedule_lr(s, 5) == pytest.approx(0.005)


def test_step_decay_published_value():
    s = StepDecay(0.002, 0.8, 15)
    assert schedule_lr(s, 30) == pytest.approx(0.00128)
    assert schedule_lr(s, 0) == pytest.approx(0.002)
    assert schedule_lr(s, 14) == pytest.approx(0.002)


def test_fixed_lr():
    assert schedule_lr(FixedLr(0.001), 57) == 0.001


def test_schedule_rejects_negative_epoch():
    with pytest.raises(ParameterError):
        schedule_lr(CosineAnnealing(0.01, 10), -1)


def test_optimizer_applies_to_params(rng, init_rng):
    layer = Linear(4, 2, init_rng, dtype=np.float64)
    opt = AdamOptimizer(layer.params())
    x = rng.standard_normal((3, 4))
    before = layer.weight.data.copy()
    layer.forward(x)
    layer.backward(np.ones((3, 2)))
    opt.step(0.01)
    assert not np.array_equal(before, layer.weight.data)


# -- checkpoint container --------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    entries = [("a.weight", rng.standard_normal((2, 3)).astype(np.float32)),
               ("b.bias", rng.standard_normal(4).astype(np.float32))]
    meta = {"kind": "test", "epoch": 3}
    path = save_checkpoint(tmp_path / "c.ckpt", entries, meta)
    arrays, back_meta = load_checkpoint(path)
    assert back_meta == meta
    for name, a in entries:
        np.testing.assert_array_equal(arrays[name], a)


def test_checkpoint_writes_are_deterministic(tmp_path, rng):
    entries = [("w", rng.standard_normal((3, 3)).astype(np.float32))]
    p1 = save_checkpoint(tmp_path / "a.ckpt", entries, {"seed": 1})
    p2 = save_checkpoint(tmp_path / "b.ckpt", entries, {"seed": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path, rng):
    from ctabd.errors import FormatError

    path = save_checkpoint(tmp_path / "c.ckpt", [("w", np.zeros(4, np.float32))], {})
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_difftensor_grad_lazy():
    t = DiffTensor(np.zeros((2, 2), np.float32))
    assert not t.has_grad
    g = t.grad
    assert t.has_grad and g.shape == (2, 2)
    with pytest.raises(ValueError):
        t.grad = np.zeros(3)
