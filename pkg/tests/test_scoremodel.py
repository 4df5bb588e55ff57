"""Score network: prediction, score bridge, DSM training behavior."""

import numpy as np
import pytest

from pmglab.engine import Layer, Mlp
from pmglab.errors import ConfigError, ShapeError, TrainingDiverged
from pmglab.schedule import build_linear_schedule
from pmglab.scoremodel import (
    DsmConfig,
    ScoreNetwork,
    TimeEmbedding,
    _predict_noise_batch,
    load_score_network,
    new_score_network,
    predict_noise,
    save_score_network,
    score_from_noise,
    train_dsm,
    train_dsm_staged,
)


@pytest.fixture(scope="module")
def small_schedule():
    return build_linear_schedule(100, 1e-4, 0.05)


def zero_weight_network(schedule, state_dim=3):
    emb = TimeEmbedding()
    dims = [state_dim + emb.dim, 4, state_dim]
    layers = tuple(
        Layer(weight=np.zeros((dims[i + 1], dims[i])), bias=np.zeros(dims[i + 1]),
              activation="tanh" if i == 0 else "identity")
        for i in range(2)
    )
    return ScoreNetwork(trunk=Mlp(layers=layers), time_embedding=emb, state_dim=state_dim,
                        tap_layers=(0,), schedule_config=schedule.to_config())


def test_zero_weight_network_predicts_zero(small_schedule):
    net = zero_weight_network(small_schedule)
    eps_hat, taps = predict_noise(net, np.array([1.0, -2.0, 0.5]), 10)
    np.testing.assert_array_equal(eps_hat, np.zeros(3))
    assert set(taps) == {0}


def test_empty_tap_set(small_schedule):
    net = new_score_network(2, (8, 8), small_schedule.to_config(), seed=0, tap_layers=())
    eps_a, taps = predict_noise(net, np.array([0.3, 0.4]), 5)
    assert taps == {}
    net_full = new_score_network(2, (8, 8), small_schedule.to_config(), seed=0)
    eps_b, taps_b = predict_noise(net_full, np.array([0.3, 0.4]), 5)
    np.testing.assert_array_equal(eps_a, eps_b)
    assert set(taps_b) == {0, 1}


def test_predict_noise_deterministic(small_schedule):
    net = new_score_network(3, (16,), small_schedule.to_config(), seed=4)
    x = np.random.default_rng(0).standard_normal(3)
    a, taps_a = predict_noise(net, x, 42)
    b, taps_b = predict_noise(net, x, 42)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(taps_a[0], taps_b[0])


def test_predict_noise_validates(small_schedule):
    net = new_score_network(3, (8,), small_schedule.to_config(), seed=0)
    with pytest.raises(ShapeError):
        predict_noise(net, np.zeros(4), 5)
    with pytest.raises(ConfigError):
        predict_noise(net, np.zeros(3), 0)
    with pytest.raises(ConfigError):
        predict_noise(net, np.zeros(3), 101)


def test_score_from_noise_zero(small_schedule):
    np.testing.assert_array_equal(score_from_noise(np.zeros(3), small_schedule, 7), np.zeros(3))


def test_score_from_noise_rejects_clean_step(small_schedule):
    with pytest.raises(ConfigError):
        score_from_noise(np.ones(2), small_schedule, 0)


def test_tweedie_bridge_is_bitwise_consistent(small_schedule):
    # (x - sqrt(1-abar) eps)/sqrt(abar) == (x + (1-abar) score)/sqrt(abar)
    s = small_schedule
    rng = np.random.default_rng(3)
    for t in (1, 13, 100):
        x = rng.standard_normal(5)
        eps = rng.standard_normal(5)
        abar = s.alpha_bar(t)
        score = score_from_noise(eps, s, t)
        lhs = (x - np.sqrt(1 - abar) * eps) / np.sqrt(abar)
        rhs = (x + (1 - abar) * score) / np.sqrt(abar)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-15)


def test_train_zero_epochs_is_identity(small_schedule):
    net = new_score_network(2, (8,), small_schedule.to_config(), seed=1)
    data = np.random.default_rng(0).standard_normal((64, 2))
    trained, losses = train_dsm(net, data, small_schedule, DsmConfig(epochs=0, seed=0))
    assert losses == []
    for a, b in zip(net.trunk.layers, trained.trunk.layers):
        np.testing.assert_array_equal(a.weight, b.weight)


def test_train_requires_data(small_schedule):
    net = new_score_network(2, (8,), small_schedule.to_config(), seed=1)
    with pytest.raises(ConfigError):
        train_dsm(net, np.zeros((0, 2)), small_schedule, DsmConfig(epochs=1))


def test_train_reproducible_bitwise(small_schedule):
    net = new_score_network(2, (8,), small_schedule.to_config(), seed=1)
    data = np.random.default_rng(5).standard_normal((256, 2))
    cfg = DsmConfig(epochs=3, batch_size=64, learning_rate=1e-3, seed=9)
    a, la = train_dsm(net, data, small_schedule, cfg)
    b, lb = train_dsm(net, data, small_schedule, cfg)
    assert la == lb
    for x, y in zip(a.trunk.layers, b.trunk.layers):
        np.testing.assert_array_equal(x.weight, y.weight)
        np.testing.assert_array_equal(x.bias, y.bias)


def test_training_divergence_aborts(small_schedule):
    # an absurd learning rate blows up the output bias within a step
    net = new_score_network(2, (8,), small_schedule.to_config(), seed=1)
    data = np.random.default_rng(5).standard_normal((64, 2))
    cfg = DsmConfig(epochs=5, batch_size=32, learning_rate=1e6, seed=0)
    with pytest.raises(TrainingDiverged) as exc:
        train_dsm(net, data, small_schedule, cfg)
    assert "loss" in exc.value.diagnostics


def test_loss_curve_smoothed_trend_decreases(small_schedule):
    net = new_score_network(1, (32, 32), small_schedule.to_config(), seed=0)
    data = np.random.default_rng(42).standard_normal((1000, 1))
    _, losses = train_dsm(net, data, small_schedule,
                          DsmConfig(epochs=30, batch_size=128, learning_rate=3e-3, seed=1))
    losses = np.asarray(losses)
    head = losses[: len(losses) // 4].mean()
    tail = losses[-len(losses) // 4:].mean()
    assert tail < head


@pytest.mark.slow
def test_unit_gaussian_training_reaches_analytic_optimum(small_schedule):
    """Eval loss within 10% of E||eps - E[eps|x_t]||^2; predictor near
    sqrt(1-abar_t) x_t (the conditional mean for unit Gaussian data)."""
    s = small_schedule
    net = new_score_network(1, (64, 64), s.to_config(), seed=0)
    data = np.random.default_rng(42).standard_normal((4000, 1))
    net, _ = train_dsm_staged(net, data, s, stages=((150, 3e-3), (150, 5e-4)), seed=1)

    rng = np.random.default_rng(99)
    n_eval = 40000
    te = rng.integers(1, s.T + 1, size=n_eval)
    x0 = rng.standard_normal((n_eval, 1))
    eps = rng.standard_normal((n_eval, 1))
    ab = s.alpha_bars[te - 1][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    pred = _predict_noise_batch(net, xt, te)
    target = np.sqrt(1 - ab) * xt  # analytic conditional mean

    eval_loss = float(np.mean(np.sum((pred - eps) ** 2, axis=1)))
    optimum = float(np.mean(np.sum((eps - target) ** 2, axis=1)))  # Monte-Carlo
    assert eval_loss <= 1.10 * optimum

    rel = np.linalg.norm(pred - target) / np.linalg.norm(target)
    assert rel < 0.1


def test_save_load_roundtrip(tmp_path, small_schedule):
    net = new_score_network(3, (8, 8), small_schedule.to_config(), seed=12, tap_layers=(1,))
    prefix = tmp_path / "score"
    save_score_network(prefix, net)
    loaded = load_score_network(prefix)
    assert loaded.state_dim == 3
    assert loaded.tap_layers == (1,)
    assert loaded.schedule_config == net.schedule_config
    x = np.random.default_rng(1).standard_normal(3)
    a, _ = predict_noise(net, x, 17)
    b, _ = predict_noise(loaded, x, 17)
    np.testing.assert_array_equal(a, b)
