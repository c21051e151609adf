import math

import numpy as np
import pytest

from tools.gnss_synth import generate_dataset
from tools.nn_core import (
    PARAM_ORDER,
    AdamState,
    Architecture,
    adam_step,
    backward,
    bce_grad,
    bce_loss,
    forward_tape,
    init_params,
)
from tools.ot_metric import DistanceCache
from tools.ssl_train import (
    Batch,
    PairSet,
    RunResult,
    SSLConfig,
    composite_batch_loss,
    enumerate_pairs,
    epoch_batches,
    run_streams,
    smoothness_grad,
    smoothness_term,
    train_run,
)
from utils.errors import ConfigurationError, InvalidParameterError


def random_cache(n, seed=0, scale=2.0):
    rng = np.random.default_rng(seed)
    d = rng.random((n, n)) * scale
    d = np.triu(d, 1)
    return DistanceCache(d=d + d.T)


def make_batch(rng, indices, labelled, size=8):
    n = len(indices)
    return Batch(
        indices=np.asarray(indices),
        x=rng.normal(size=(n, 2, size, size)),
        y=rng.integers(0, 2, size=n).astype(np.int64),
        labelled=np.asarray(labelled, dtype=bool),
    )


def test_enumerate_pairs_skips_labelled_pairs():
    pairs = enumerate_pairs([5, 2, 9], [True, True, False])
    assert pairs.indices.tolist() == [[5, 9], [2, 9]]
    assert pairs.positions.tolist() == [[0, 2], [1, 2]]


def test_enumerate_pairs_orders_by_dataset_index():
    pairs = enumerate_pairs([9, 2], [False, True])
    assert pairs.indices.tolist() == [[2, 9]]
    assert pairs.positions.tolist() == [[1, 0]]


def test_enumerate_pairs_edge_cases():
    assert len(enumerate_pairs([3], [False])) == 0
    assert len(enumerate_pairs([1, 2, 3], [True, True, True])) == 0
    assert len(enumerate_pairs([1, 2, 3, 4], [False] * 4)) == 6
    with pytest.raises(InvalidParameterError):
        enumerate_pairs([1, 1], [False, False])
    with pytest.raises(InvalidParameterError):
        enumerate_pairs([1, 2], [False])


def test_pair_count_over_random_compositions():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        k = int(rng.integers(1, 11))
        idx = rng.choice(100, size=k, replace=False)
        lab = rng.random(k) < rng.random()
        pairs = enumerate_pairs(idx, lab)
        k_l = int(lab.sum())
        assert len(pairs) == math.comb(k, 2) - math.comb(k_l, 2)
        if len(pairs):
            assert (pairs.indices[:, 0] < pairs.indices[:, 1]).all()
            assert not (lab[pairs.positions[:, 0]] & lab[pairs.positions[:, 1]]).any()
            assert len({tuple(p) for p in pairs.indices.tolist()}) == len(pairs)


def test_smoothness_single_pair():
    pairs = PairSet(np.array([[0, 1]]), np.array([[0, 1]]), np.array([0.5]))
    assert smoothness_term(pairs, np.array([0.9, 0.1])) == pytest.approx(0.32, abs=1e-15)
    np.testing.assert_allclose(smoothness_grad(pairs, np.array([0.9, 0.1])), [0.8, -0.8])


def test_smoothness_needs_weights():
    with pytest.raises(InvalidParameterError):
        smoothness_term(enumerate_pairs([0, 1], [False, False]), np.array([0.2, 0.4]))


def test_smoothness_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    cache = random_cache(7)
    pairs = enumerate_pairs(np.arange(7), rng.random(7) < 0.4).weighted(cache, 1.0)
    f = rng.random(7)
    grad = smoothness_grad(pairs, f)
    eps = 1e-7
    for k in range(7):
        up, down = f.copy(), f.copy()
        up[k] += eps
        down[k] -= eps
        fd = (smoothness_term(pairs, up) - smoothness_term(pairs, down)) / (2 * eps)
        assert grad[k] == pytest.approx(fd, abs=1e-7)
    assert smoothness_term(pairs, f - 0.01 * grad) < smoothness_term(pairs, f)


def test_weights_follow_the_gaussian_kernel():
    cache = DistanceCache(d=np.array([[0.0, 2.0], [2.0, 0.0]]))
    pairs = enumerate_pairs([0, 1], [False, False]).weighted(cache, 2.0)
    assert pairs.weights[0] == pytest.approx(math.exp(-2.0))


def test_loss_separates_into_supervised_and_smoothness(tiny_arch):
    rng = np.random.default_rng(2)
    params = init_params(tiny_arch, rng)
    batch = make_batch(rng, [4, 0, 7, 2, 5], [True, False, True, False, False])
    cfg = SSLConfig(lam=3.0, sigma=1.5, batch_size=5)
    out = composite_batch_loss(batch, params, cfg, random_cache(8))
    p = forward_tape(batch.x, params).p
    expected_sup = float(np.sum(bce_loss(p[batch.labelled], batch.y[batch.labelled])))
    assert out.supervised == pytest.approx(expected_sup, abs=1e-12)
    assert out.total == pytest.approx(out.supervised + 3.0 * out.smoothness, abs=1e-12)
    assert out.n_pairs == math.comb(5, 2) - 1
    assert out.grads is None


def test_lambda_zero_drops_the_pair_term(tiny_arch):
    rng = np.random.default_rng(3)
    params = init_params(tiny_arch, rng)
    batch = make_batch(rng, [0, 1, 2], [True, False, True])
    out = composite_batch_loss(batch, params, SSLConfig(lam=0.0, batch_size=3), cache=None)
    assert out.smoothness == 0.0 and out.n_pairs == 0
    assert out.total == out.supervised


def test_loss_is_permutation_invariant(tiny_arch):
    rng = np.random.default_rng(4)
    params = init_params(tiny_arch, rng)
    batch = make_batch(rng, [3, 1, 6, 0, 5, 2], [True, True, False, False, True, False])
    cfg = SSLConfig(lam=2.0, sigma=1.0, batch_size=6)
    cache = random_cache(8, seed=4)
    perm = np.array([5, 2, 0, 4, 1, 3])
    shuffled = Batch(batch.indices[perm], batch.x[perm], batch.y[perm], batch.labelled[perm])
    a = composite_batch_loss(batch, params, cfg, cache)
    b = composite_batch_loss(shuffled, params, cfg, cache)
    assert a.total == pytest.approx(b.total, abs=1e-12)
    assert a.smoothness == pytest.approx(b.smoothness, abs=1e-12)


def test_batch_without_labels_is_pure_smoothness(tiny_arch):
    rng = np.random.default_rng(5)
    params = init_params(tiny_arch, rng)
    batch = make_batch(rng, [0, 1, 2, 3], [False] * 4)
    out = composite_batch_loss(batch, params, SSLConfig(lam=4.0, batch_size=4), random_cache(4))
    assert out.supervised == 0.0
    assert out.total == pytest.approx(4.0 * out.smoothness, abs=1e-15)
    assert out.n_pairs == 6


def test_composite_gradient_matches_finite_differences(tiny_arch):
    rng = np.random.default_rng(6)
    params = init_params(tiny_arch, rng)
    batch = make_batch(rng, [0, 1, 2, 3, 4, 5], [True, True, True, False, False, False])
    cfg = SSLConfig(lam=10.0, sigma=1.0, batch_size=6)
    cache = random_cache(6, seed=6, scale=1.0)
    grads = composite_batch_loss(batch, params, cfg, cache, with_grad=True).grads

    def total():
        return composite_batch_loss(batch, params, cfg, cache).total

    eps = 1e-6
    for name in PARAM_ORDER:
        arr = getattr(params, name)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = total()
            arr[idx] = old - eps
            down = total()
            arr[idx] = old
            fd[idx] = (up - down) / (2 * eps)
        g = getattr(grads, name)
        denom = max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(g - fd) / denom < 1e-4, name


def test_missing_cache_is_a_configuration_error(tiny_arch):
    rng = np.random.default_rng(7)
    batch = make_batch(rng, [0, 1], [False, False])
    with pytest.raises(ConfigurationError):
        composite_batch_loss(batch, init_params(tiny_arch, rng), SSLConfig(lam=1.0, batch_size=2), None)


def test_epoch_batches_cover_the_pool_once():
    batches = epoch_batches(10, 4, np.random.default_rng(0))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def supervised_reference_run(train, cfg):
    """Plain supervised ADAM loop written without the pair machinery."""
    arch = Architecture(height=train.grid.height, width=train.grid.width)
    init_rng, shuffle_rng = run_streams(cfg.seed)
    params = init_params(arch, init_rng)
    state = AdamState.fresh(params)
    x, y, lab = train.images(), train.labels(), train.labelled_mask()
    losses = []
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        for k in range(0, len(train), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            tape = forward_tape(x[idx], params)
            keep = lab[idx]
            dp = np.zeros_like(tape.p)
            dp[keep] = bce_grad(tape.p[keep], y[idx][keep])
            losses.append(float(np.sum(bce_loss(tape.p[keep], y[idx][keep]))) if keep.any() else 0.0)
            params, state = adam_step(params, backward(tape, params, dp), state)
    return losses, params


def test_lambda_zero_run_is_plain_supervised_training(small_datasets):
    train, val = small_datasets
    cfg = SSLConfig(lam=0.0, batch_size=4, epochs=2, seed=11)
    seen = []
    _, params = train_run(train, val, cfg, cache=None, on_batch=lambda step, loss: seen.append(loss.total))
    expected, ref_params = supervised_reference_run(train, cfg)
    assert len(seen) == len(expected) == 6
    np.testing.assert_allclose(seen, expected, rtol=0, atol=1e-12)
    for name in PARAM_ORDER:
        np.testing.assert_allclose(getattr(params, name), getattr(ref_params, name), rtol=0, atol=1e-12)


def test_single_epoch_run(small_datasets):
    train, val = small_datasets
    result, _ = train_run(train, val, SSLConfig(lam=0.0, batch_size=4, epochs=1, seed=1), cache=None, run_id="r")
    assert len(result.val_accuracies) == 1 and len(result.train_losses) == 1
    assert result.max_accuracy == result.val_accuracies[0]
    assert result.final_train_loss == result.train_losses[0]
    assert result.run_id == "r" and result.seed == 1


def test_runs_are_deterministic(small_datasets):
    train, val = small_datasets
    cache = random_cache(len(train), seed=8)
    cfg = SSLConfig(lam=1.0, sigma=1.0, batch_size=4, epochs=2, seed=3)
    a, _ = train_run(train, val, cfg, cache)
    b, _ = train_run(train, val, cfg, cache)
    assert a.val_accuracies == b.val_accuracies
    assert a.train_losses == b.train_losses


def test_train_run_input_checks(small_datasets):
    train, val = small_datasets
    cfg = SSLConfig(lam=1.0, batch_size=4, epochs=1)
    with pytest.raises(ConfigurationError):
        train_run(train, val, cfg, cache=None)
    with pytest.raises(ConfigurationError):
        train_run(train, val, cfg, cache=random_cache(5))
    with pytest.raises(ConfigurationError):
        train_run(train, train, SSLConfig(epochs=1, batch_size=4), cache=None)


def test_cache_of_another_training_set_is_rejected(small_datasets, small_grid):
    train, val = small_datasets
    other, _ = generate_dataset(small_grid, n_sup=4, cn0_dbhz=40.0, seed=8, n_train=12, n_val=6)
    assert len(other) == len(train)
    cfg = SSLConfig(lam=1.0, batch_size=4, epochs=1)
    foreign = random_cache(len(train))
    foreign.meta["dataset_hash"] = other.content_hash()
    with pytest.raises(ConfigurationError):
        train_run(train, val, cfg, foreign)

    own = random_cache(len(train))
    own.meta["dataset_hash"] = train.content_hash()
    result, _ = train_run(train, val, cfg, own)
    assert len(result.val_accuracies) == 1


@pytest.mark.parametrize("kwargs", [
    {"lam": -1.0},
    {"lam": float("nan")},
    {"sigma": 0.0},
    {"epochs": 0},
    {"batch_size": 0},
    {"lam": 1.0, "batch_size": 1},
])
def test_ssl_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        SSLConfig(**kwargs)


def test_run_result_validation():
    with pytest.raises(InvalidParameterError):
        RunResult(val_accuracies=[0.5, 1.2], max_accuracy=1.2, final_train_loss=0.0, seed=0)
    with pytest.raises(InvalidParameterError):
        RunResult(val_accuracies=[0.5, 0.7], max_accuracy=0.5, final_train_loss=0.0, seed=0)
