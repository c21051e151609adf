import math

import numpy as np
import pytest

from tools.nn_core import (
    PARAM_ORDER,
    AdamState,
    Architecture,
    ModelParams,
    adam_step,
    backward,
    bce_grad,
    bce_loss,
    conv2d_backward,
    conv2d_forward,
    forward,
    forward_tape,
    init_params,
    load_checkpoint,
    maxpool2x2,
    save_checkpoint,
    standardize,
)
from utils.config import OptimizerConfig
from utils.errors import PersistenceError, ShapeError


def naive_conv(x, w, b):
    c_out, c_in, k, _ = w.shape
    h, wd = x.shape[1] - k + 1, x.shape[2] - k + 1
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for r in range(h):
            for c in range(wd):
                out[o, r, c] = np.sum(x[:, r:r + k, c:c + k] * w[o]) + b[o]
    return out


def rel_error(a, b):
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def test_default_architecture_flattens_to_3872():
    arch = Architecture()
    assert arch.flatten_dim == 3872
    assert arch.shape_chain()[:4] == [(2, 26, 26), (16, 24, 24), (32, 22, 22), (32, 11, 11)]


def test_tiny_architecture(tiny_arch):
    assert tiny_arch.flatten_dim == 12
    assert tiny_arch.param_shapes()["fc1_w"] == (5, 12)


def test_odd_map_before_pooling_is_rejected():
    with pytest.raises(ShapeError):
        Architecture(height=25, width=26)


def test_init_params_shapes_and_determinism(tiny_arch):
    a = init_params(tiny_arch, np.random.default_rng(1))
    b = init_params(tiny_arch, np.random.default_rng(1))
    a.validate(tiny_arch)
    for name in PARAM_ORDER:
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert not a.conv1_b.any() and not a.fc2_b.any()


def test_init_variance_follows_fan_scaling():
    arch = Architecture()
    shapes = arch.param_shapes()
    expected = {}
    for name in ("conv1_w", "conv2_w", "fc1_w"):
        expected[name] = 2.0 / int(np.prod(shapes[name][1:]))
    fan_in, fan_out = shapes["fc2_w"][1], shapes["fc2_w"][0]
    expected["fc2_w"] = 2.0 / (fan_in + fan_out)

    observed = {name: [] for name in expected}
    for seed in range(30):
        params = init_params(arch, np.random.default_rng(seed))
        for name in expected:
            observed[name].append(np.var(getattr(params, name)))
    for name, target in expected.items():
        assert np.mean(observed[name]) == pytest.approx(target, rel=0.2), name


def test_validate_rejects_wrong_shapes(tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(0))
    params.fc1_w = np.zeros((5, 11))
    with pytest.raises(ShapeError):
        params.validate(tiny_arch)


def test_conv_matches_a_direct_loop(rng):
    x = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(conv2d_forward(x, w, b), naive_conv(x, w, b), atol=1e-12)


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        conv2d_forward(rng.normal(size=(3, 5, 5)), rng.normal(size=(2, 2, 3, 3)), np.zeros(2))


def test_maxpool_picks_window_maxima():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    out, argmax = maxpool2x2(x)
    np.testing.assert_array_equal(out[0], [[5, 7], [13, 15]])
    assert (argmax == 3).all()
    with pytest.raises(ShapeError):
        maxpool2x2(np.zeros((1, 3, 4)))


def test_forward_single_and_batch(tiny_arch, small_datasets):
    params = init_params(tiny_arch, np.random.default_rng(3))
    train, _ = small_datasets
    p = forward(train.samples[0].image, params)
    assert isinstance(p, float) and 0.0 < p < 1.0
    batch = forward(train.images()[:5], params)
    assert batch.shape == (5,)
    assert batch[0] == pytest.approx(p, abs=1e-15)


def test_forward_rejects_wrong_input(tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(3))
    with pytest.raises(ShapeError):
        forward(np.zeros((3, 8, 8)), params)
    with pytest.raises(ShapeError):
        forward(np.zeros((2, 10, 10)), params)


def test_conv_backward_matches_finite_differences(rng):
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(2, 3, 4, 4))
    dx, dw, db = conv2d_backward(g, x, w)

    def f(x_, w_, b_):
        return float(np.sum(conv2d_forward(x_, w_, b_) * g))

    eps = 1e-6
    for arr, grad in ((x, dx), (w, dw), (b, db)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = f(x, w, b)
            arr[idx] = old - eps
            down = f(x, w, b)
            arr[idx] = old
            fd[idx] = (up - down) / (2 * eps)
        assert rel_error(grad, fd) < 1e-6


def test_full_backward_matches_finite_differences(tiny_arch, rng):
    params = init_params(tiny_arch, np.random.default_rng(5))
    x = rng.normal(size=(4, 2, 8, 8))
    y = np.array([0.0, 1.0, 1.0, 0.0])

    def loss(p_):
        return float(np.sum(bce_loss(forward(x, p_), y)))

    tape = forward_tape(x, params)
    grads = backward(tape, params, bce_grad(tape.p, y))

    eps = 1e-6
    for name in PARAM_ORDER:
        arr = getattr(params, name)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss(params)
            arr[idx] = old - eps
            down = loss(params)
            arr[idx] = old
            fd[idx] = (up - down) / (2 * eps)
        assert rel_error(getattr(grads, name), fd) < 1e-4, name


def test_bce_values():
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2.0))
    assert bce_loss(0.25, 0) == pytest.approx(-math.log(0.75))
    # clamped at 1e-7 on both ends
    assert bce_loss(0.0, 1) == pytest.approx(-math.log(1e-7))
    assert bce_loss(1.0, 1) == pytest.approx(-math.log1p(-1e-7))
    np.testing.assert_allclose(bce_loss(np.array([0.5, 0.5]), np.array([0, 1])), [math.log(2.0)] * 2)


def test_bce_grad_is_zero_inside_the_clamp():
    g = bce_grad(np.array([0.0, 0.5, 1.0]), np.array([1.0, 1.0, 0.0]))
    assert g[0] == 0.0 and g[2] == 0.0
    assert g[1] == pytest.approx(-2.0)


def test_adam_first_step_moves_by_the_learning_rate(tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(0))
    grads = params.map(lambda a: np.full_like(a, 0.5))
    state = AdamState.fresh(params, OptimizerConfig(learning_rate=0.01))
    before = params.copy()
    new, new_state = adam_step(params, grads, state)
    assert new_state.step == 1 and state.step == 0
    for name in PARAM_ORDER:
        # bias-corrected moments make the first step lr * sign(g)
        np.testing.assert_allclose(getattr(before, name) - getattr(new, name), 0.01, rtol=1e-6)
        np.testing.assert_array_equal(getattr(params, name), getattr(before, name))


def test_adam_descends_a_quadratic(tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(0)).map(lambda a: a + 1.0)
    state = AdamState.fresh(params, OptimizerConfig(learning_rate=0.05))

    def norm(p):
        return sum(float(np.sum(a * a)) for a in p.arrays().values())

    start = norm(params)
    for _ in range(200):
        params, state = adam_step(params, params.map(lambda a: 2.0 * a), state)
    assert norm(params) < 0.01 * start


def test_standardize_per_sample_and_channel(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(3, 2, 5, 5))
    x[1, 0] = 4.0
    z = standardize(x)
    np.testing.assert_allclose(z[0].mean(axis=(-2, -1)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[0].std(axis=(-2, -1)), 1.0)
    np.testing.assert_array_equal(z[1, 0], 0.0)


def test_checkpoint_round_trip(tmp_path, tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(9))
    save_checkpoint(params, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert isinstance(loaded, ModelParams)
    for name in PARAM_ORDER:
        np.testing.assert_array_equal(getattr(loaded, name), getattr(params, name))


def test_truncated_checkpoint_is_rejected(tmp_path, tiny_arch):
    save_checkpoint(init_params(tiny_arch, np.random.default_rng(9)), tmp_path / "ckpt")
    data = tmp_path / "ckpt" / "model.f64"
    data.write_bytes(data.read_bytes()[:-8])
    with pytest.raises(PersistenceError):
        load_checkpoint(tmp_path / "ckpt")
    with pytest.raises(PersistenceError):
        load_checkpoint(tmp_path / "missing")
