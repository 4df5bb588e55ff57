"""Manifold testbeds: sampling, analytic scores, concentration geometry."""

import numpy as np
import pytest

from pmglab.errors import ConfigError
from pmglab import manifold as mf
from pmglab.manifold import (
    LatentGaussian,
    LinearAutoencoder,
    LinearManifold,
    analytic_log_density,
    analytic_score,
    concentration_radius,
    distance_to_manifold,
    epsilon_band,
    make_manifold,
    sample_manifold_data,
    tangent_residual,
)
from pmglab.schedule import build_linear_schedule


@pytest.fixture(scope="module")
def schedule():
    return build_linear_schedule(1000, 1e-4, 0.02)


def test_make_manifold_orthonormal():
    m = make_manifold(10, 3, seed=0)
    np.testing.assert_allclose(m.basis.T @ m.basis, np.eye(3), atol=1e-12)
    assert (m.ambient_dim, m.intrinsic_dim) == (10, 3)


def test_manifold_requires_k_below_D():
    with pytest.raises(ConfigError):
        make_manifold(4, 4, seed=0)
    with pytest.raises(ConfigError):
        make_manifold(1, 1, seed=0)


def test_autoencoder_roundtrip_on_manifold():
    m = make_manifold(8, 3, seed=2, offset=np.arange(8.0))
    ae = LinearAutoencoder(m)
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.standard_normal(3)
        x = ae.decode(z)
        np.testing.assert_allclose(ae.decode(ae.encode(x)), x, atol=1e-10)
        # Jacobian identity dE/dx . dD/dz = I realized as exact latent roundtrip
        np.testing.assert_allclose(ae.encode(ae.decode(z)), z, atol=1e-10)


def test_degenerate_latent_sampling_collapses_to_offset():
    m = make_manifold(6, 2, seed=1, offset=np.full(6, 0.5))
    g = LatentGaussian(mean=np.zeros(2), covariance=np.zeros((2, 2)), degenerate=True)
    pts = sample_manifold_data(m, g, 5, seed=3)
    np.testing.assert_allclose(pts, np.tile(m.offset, (5, 1)), atol=1e-14)


def test_non_pd_covariance_rejected():
    with pytest.raises(ConfigError):
        LatentGaussian(mean=np.zeros(2), covariance=np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ConfigError):
        LatentGaussian(mean=np.zeros(2), covariance=np.array([[1.0, 0.5], [0.4, 1.0]]))


def test_samples_lie_on_manifold():
    m = make_manifold(9, 4, seed=7, offset=np.linspace(-1, 1, 9))
    g = LatentGaussian(mean=np.ones(4), covariance=np.eye(4) * 2.0)
    pts = sample_manifold_data(m, g, 200, seed=11)
    d = distance_to_manifold(pts, m, scale=1.0)
    assert np.max(d) < 1e-10


def test_sample_latent_mean_clt_bound():
    m = make_manifold(12, 3, seed=4)
    mean = np.array([0.5, -1.0, 2.0])
    g = LatentGaussian(mean=mean, covariance=np.eye(3))
    n = 10_000
    pts = sample_manifold_data(m, g, n, seed=13)
    ae = LinearAutoencoder(m)
    emp = ae.encode(pts).mean(axis=0)
    assert np.all(np.abs(emp - mean) < 4.0 / np.sqrt(n))


def test_sampling_deterministic_per_seed():
    m = make_manifold(5, 2, seed=0)
    g = LatentGaussian(mean=np.zeros(2), covariance=np.eye(2))
    a = sample_manifold_data(m, g, 8, seed=21)
    b = sample_manifold_data(m, g, 8, seed=21)
    np.testing.assert_array_equal(a, b)


# -- analytic score --------------------------------------------------------


def test_score_projector_identity(schedule):
    # zero mean/offset and identity latent cov: in the column space the
    # noised covariance is abar P + (1-abar) I, so score(x) = -x exactly
    m = make_manifold(7, 3, seed=5)
    g = LatentGaussian(mean=np.zeros(3), covariance=np.eye(3))
    rng = np.random.default_rng(2)
    z = rng.standard_normal(3)
    x = m.basis @ z  # in-column-space point
    for t in (1, 250, 1000):
        sc = analytic_score(m, g, schedule, x, t)
        np.testing.assert_allclose(sc, -x, atol=1e-10)


def test_score_matches_log_density_finite_difference(schedule):
    m = make_manifold(5, 2, seed=9, offset=np.array([0.2, -0.1, 0.4, 0.0, 1.0]))
    g = LatentGaussian(mean=np.array([0.3, -0.7]),
                       covariance=np.array([[1.5, 0.3], [0.3, 0.8]]))
    rng = np.random.default_rng(31)
    h = 1e-5
    for t in (50, 400, 900):
        x = rng.standard_normal(5)
        sc = analytic_score(m, g, schedule, x, t)
        fd = np.zeros(5)
        for i in range(5):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (analytic_log_density(m, g, schedule, xp, t)
                     - analytic_log_density(m, g, schedule, xm, t)) / (2 * h)
        rel = np.abs(sc - fd) / np.maximum(np.abs(fd), 1e-6)
        assert np.max(rel) < 1e-5


def test_score_batched_matches_single(schedule):
    m = make_manifold(6, 2, seed=3)
    g = LatentGaussian(mean=np.zeros(2), covariance=np.eye(2))
    X = np.random.default_rng(8).standard_normal((4, 6))
    batch = analytic_score(m, g, schedule, X, 77)
    for i in range(4):
        np.testing.assert_allclose(batch[i], analytic_score(m, g, schedule, X[i], 77),
                                   atol=1e-12)


# -- distance / radius / band ------------------------------------------------


def test_distance_orthogonal_component():
    basis = np.zeros((2, 1))
    basis[0, 0] = 1.0
    m = LinearManifold(basis=basis, offset=np.zeros(2))
    for scale in (0.3, 1.0, 2.5):
        assert distance_to_manifold(np.array([5.0, 3.0]), m, scale) == pytest.approx(3.0)


def test_distance_zero_on_scaled_manifold():
    m = make_manifold(6, 2, seed=12, offset=np.linspace(0, 1, 6))
    z = np.array([1.0, -2.0])
    scale = 0.7
    x = scale * (m.basis @ z + m.offset)
    assert distance_to_manifold(x, m, scale) < 1e-12


def test_distance_matches_latent_grid_search():
    # brute-force minimization over a dense k=1 latent grid
    m = make_manifold(4, 1, seed=6, offset=np.array([0.1, 0.2, -0.3, 0.5]))
    rng = np.random.default_rng(17)
    grid = np.linspace(-8, 8, 40001)
    candidates = grid[:, None] * m.basis[:, 0][None, :] + m.offset
    for _ in range(5):
        x = rng.standard_normal(4) * 2
        brute = np.min(np.linalg.norm(candidates - x, axis=1))
        fast = distance_to_manifold(x, m, 1.0)
        assert abs(brute - fast) < 1e-3  # grid resolution bound


def test_concentration_radius_values(schedule):
    flat = build_linear_schedule(1, 0.5, 0.5)  # abar_1 = 0.5
    assert concentration_radius(flat, 1, 100, 2) == pytest.approx(7.0)
    assert concentration_radius(flat, 0, 100, 2) == 0.0  # abar(0) = 1
    assert concentration_radius(flat, 1, 3, 2) == pytest.approx(np.sqrt(0.5))


def test_epsilon_band_in_unit_interval(schedule):
    rng = np.random.default_rng(5)
    for _ in range(50):
        delta = float(rng.uniform(1e-6, 0.999))
        D = int(rng.integers(3, 200))
        k = int(rng.integers(1, D))
        t = int(rng.integers(1, schedule.T + 1))
        eps = epsilon_band(delta, schedule, t, D, k)
        assert 0.0 < eps <= 1.0


def test_epsilon_band_hand_value(schedule):
    # delta = 2 exp(-(D-k)) makes eps' = 1 and the first radical vanish:
    # eps = min{1, 4 / (sqrt(1-abar_t) (D-k))}
    D, k, t = 30, 2, 500
    delta = 2.0 * np.exp(-(D - k))
    want = min(1.0, 4.0 / (np.sqrt(1.0 - schedule.alpha_bar(t)) * (D - k)))
    assert epsilon_band(delta, schedule, t, D, k) == pytest.approx(want, rel=1e-12)


def test_epsilon_band_monotone_in_regime(schedule):
    """Decreasing in D-k while the chi-square tail term dominates
    (2 sqrt(eps') >= 1, where the closed form is the tail ratio alone)."""
    delta, t, k = 0.01, 500, 1
    limit = int(4 * (-np.log(delta / 2.0)))  # eps' >= 1/4 up to here
    values = [epsilon_band(delta, schedule, t, k + n, k) for n in range(2, limit + 1)]
    uncapped = [v for v in values if v < 1.0]
    assert len(uncapped) >= 10
    assert all(a > b for a, b in zip(uncapped, uncapped[1:]))
    # decreasing in delta over the same regime
    bands = [epsilon_band(d, schedule, t, 12, 2) for d in (0.001, 0.01, 0.05, 0.15)]
    assert all(a > b for a, b in zip(bands, bands[1:]))


def test_tangent_residual_zero_for_orthonormal_basis():
    m = make_manifold(20, 5, seed=3, offset=np.ones(20))
    ae = LinearAutoencoder(m)
    rng = np.random.default_rng(7)
    for _ in range(100):
        assert tangent_residual(ae, rng.standard_normal(5)) <= 1e-10
    assert tangent_residual(ae, np.zeros(5)) == 0.0


def test_tangent_residual_positive_for_skewed_basis():
    # deliberately break orthonormality: the perfect-autoencoder premise fails
    m = make_manifold(6, 2, seed=1)
    skew = m.basis.copy()
    skew[:, 1] = 0.5 * skew[:, 0] + skew[:, 1]
    bad = object.__new__(LinearManifold)
    object.__setattr__(bad, "basis", skew)
    object.__setattr__(bad, "offset", np.zeros(6))
    ae = LinearAutoencoder.__new__(LinearAutoencoder)
    object.__setattr__(ae, "manifold", bad)
    assert tangent_residual(ae, np.array([1.0, 1.0])) > 1e-3


# -- distribution concentration (shell law) ----------------------------------


def test_forward_noise_concentrates_on_shell(schedule):
    D, k, n = 100, 2, 10_000
    m = make_manifold(D, k, seed=0)  # zero offset, as in the shell argument
    g = LatentGaussian(mean=np.zeros(k), covariance=np.eye(k))
    delta = 0.01
    rng = np.random.default_rng(123)
    for t in (100, 500, 900):
        abar = schedule.alpha_bar(t)
        x0 = sample_manifold_data(m, g, n, seed=1000 + t)
        xt = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * rng.standard_normal((n, D))
        d = distance_to_manifold(xt, m, np.sqrt(abar))
        r = concentration_radius(schedule, t, D, k)
        assert abs(d.mean() - r) / r < 0.02
        eps = epsilon_band(delta, schedule, t, D, k)
        inside = np.mean(np.abs(d - r) < eps * r)
        assert inside >= 1.0 - delta


def test_noise_sum_variance_identity(schedule):
    # sqrt(1 - abar_prev - sigma^2) e1 + sigma e2 has variance 1 - abar_prev
    from pmglab.schedule import ddim_sigma
    rng = np.random.default_rng(77)
    n = 100_000
    for t in (50, 200, 500, 800, 1000):
        sigma = ddim_sigma(schedule, t, 1.0)
        abar_prev = schedule.alpha_bar(t - 1)
        e1 = rng.standard_normal(n)
        e2 = rng.standard_normal(n)
        combined = np.sqrt(1 - abar_prev - sigma**2) * e1 + sigma * e2
        assert abs(combined.var() - (1 - abar_prev)) / (1 - abar_prev) < 0.02


# -- serialization -----------------------------------------------------------


def test_testbed_json_roundtrip():
    m = make_manifold(6, 2, seed=9, offset=np.linspace(0, 1, 6))
    g = LatentGaussian(mean=np.array([1.0, -1.0]), covariance=np.eye(2))
    text = mf.testbed_to_json(m, g, seed=9)
    m2, g2, seed = mf.testbed_from_json(text)
    assert seed == 9
    np.testing.assert_array_equal(m.basis, m2.basis)
    np.testing.assert_array_equal(m.offset, m2.offset)
    np.testing.assert_array_equal(g.mean, g2.mean)
    assert '"identity"' in text


def test_testbed_json_rejects_garbage():
    with pytest.raises(ConfigError):
        mf.testbed_from_json("{not json")
    with pytest.raises(ConfigError):
        mf.testbed_from_json("{}")
