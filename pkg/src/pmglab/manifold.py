"""Linear-subspace testbeds: exact autoencoders, analytic scores, geometry.

A testbed is a k-dimensional affine subspace of R^D with an orthonormal
basis, a Gaussian over the latent coordinates, and the closed-form score
of the forward-noised marginal.  These provide independent ground truth
for the samplers and the concentration checks.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .schedule import NoiseSchedule
from .validation import as_matrix, as_vector, check_finite, check_in_range, ensure_rng

__all__ = [
    "LinearManifold",
    "LinearAutoencoder",
    "LatentGaussian",
    "make_manifold",
    "sample_manifold_data",
    "analytic_score",
    "analytic_noise_prediction",
    "distance_to_manifold",
    "concentration_radius",
    "epsilon_band",
    "tangent_residual",
    "testbed_to_json",
    "testbed_from_json",
]


@dataclass(frozen=True)
class LinearManifold:
    """Affine k-dim subspace of R^D: {basis @ z + offset}."""

    basis: np.ndarray   # (D, k), orthonormal columns
    offset: np.ndarray  # (D,)

    def __post_init__(self):
        basis = as_matrix(self.basis, name="basis")
        offset = as_vector(self.offset, basis.shape[0], "offset")
        D, k = basis.shape
        if not 1 <= k < D:
            raise ConfigError(f"need 1 <= k < D, got D={D}, k={k}")
        gram = basis.T @ basis
        if np.max(np.abs(gram - np.eye(k))) > 1e-10:
            raise ConfigError("basis columns must be orthonormal within 1e-10")
        basis.flags.writeable = False
        offset.flags.writeable = False
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "offset", offset)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def intrinsic_dim(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True)
class LinearAutoencoder:
    """Exact encode/decode pair for a linear manifold.

    encode(x) = basis^T (x - offset); decode(z) = basis @ z + offset.
    The round trip is exact for points on the manifold, so decoded
    gradient directions stay in the tangent (column) space.
    """

    manifold: LinearManifold

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.manifold.offset) @ self.manifold.basis

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return z @ self.manifold.basis.T + self.manifold.offset

    def tangent_lift(self, v) -> np.ndarray:
        """Decode a latent direction: basis @ v, no offset (tangent vector)."""
        v = np.asarray(v, dtype=np.float64)
        return v @ self.manifold.basis.T

    @property
    def latent_dim(self) -> int:
        return self.manifold.intrinsic_dim

    @property
    def ambient_dim(self) -> int:
        return self.manifold.ambient_dim


@dataclass(frozen=True)
class LatentGaussian:
    """Gaussian over latent coordinates; `degenerate` permits zero covariance."""

    mean: np.ndarray
    covariance: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        mean = as_vector(self.mean, name="mean")
        cov = as_matrix(self.covariance, (mean.shape[0], mean.shape[0]), "covariance")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ConfigError("covariance must be symmetric within 1e-12")
        if self.degenerate:
            if np.max(np.abs(cov)) != 0.0:
                raise ConfigError("degenerate latent Gaussian must have zero covariance")
        else:
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ConfigError("covariance must be positive definite") from exc
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def factor(self) -> np.ndarray:
        if self.degenerate:
            return np.zeros_like(self.covariance)
        return np.linalg.cholesky(self.covariance)


def make_manifold(D: int, k: int, seed=0, offset=None) -> LinearManifold:
    """QR-orthonormalized random basis; offset defaults to zero."""
    if not 1 <= k < D:
        raise ConfigError(f"need 1 <= k < D, got D={D}, k={k}")
    rng = ensure_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((D, k)))
    offset = np.zeros(D) if offset is None else as_vector(offset, D, "offset")
    return LinearManifold(basis=q, offset=offset)


def sample_manifold_data(m: LinearManifold, g: LatentGaussian, n: int, seed=0) -> np.ndarray:
    """n ambient points decode(z) with z drawn from g; deterministic per seed."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if g.dim != m.intrinsic_dim:
        raise ShapeError("latent Gaussian dim != manifold intrinsic dim")
    rng = ensure_rng(seed)
    z = g.mean + rng.standard_normal((n, g.dim)) @ g.factor().T
    return z @ m.basis.T + m.offset


def _noised_moments(m: LinearManifold, g: LatentGaussian, s: NoiseSchedule, t: int):
    """Mean and covariance of x_t = sqrt(abar) decode(z) + sqrt(1-abar) eps."""
    abar = s.alpha_bar(t)
    mu = np.sqrt(abar) * (m.basis @ g.mean + m.offset)
    cov = abar * (m.basis @ g.covariance @ m.basis.T) + (1.0 - abar) * np.eye(m.ambient_dim)
    return mu, cov


def analytic_score(m: LinearManifold, g: LatentGaussian, s: NoiseSchedule,
                   x_t, t: int) -> np.ndarray:
    """Closed-form score of the noised testbed marginal at step t.

    score(x) = -Sigma_t^{-1} (x - mu_t) with
    mu_t = sqrt(abar_t) (basis @ mean + offset) and
    Sigma_t = abar_t basis cov basis^T + (1 - abar_t) I.
    """
    if t < 1:
        raise ConfigError("analytic score needs t >= 1 (positive noise)")
    x = np.asarray(x_t, dtype=np.float64)
    mu, cov = _noised_moments(m, g, s, t)
    assert 1.0 - s.alpha_bar(t) > 0.0, "Sigma_t is singular only at alpha_bar = 1"
    chol = np.linalg.cholesky(cov)
    diff = x - mu
    solved = np.linalg.solve(chol.T, np.linalg.solve(chol, diff.T if diff.ndim == 2 else diff))
    if diff.ndim == 2:
        return -solved.T
    return -solved


def analytic_noise_prediction(m: LinearManifold, g: LatentGaussian, s: NoiseSchedule,
                              x_t, t: int) -> np.ndarray:
    """Optimal noise estimate: -sqrt(1 - abar_t) * score(x_t)."""
    return -np.sqrt(1.0 - s.alpha_bar(t)) * analytic_score(m, g, s, x_t, t)


def analytic_log_density(m: LinearManifold, g: LatentGaussian, s: NoiseSchedule,
                         x_t, t: int) -> float:
    """Log density of the noised marginal (for finite-difference oracles)."""
    x = as_vector(x_t, m.ambient_dim, "x_t")
    mu, cov = _noised_moments(m, g, s, t)
    chol = np.linalg.cholesky(cov)
    diff = np.linalg.solve(chol, x - mu)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (diff @ diff) - 0.5 * logdet - 0.5 * m.ambient_dim * np.log(2.0 * np.pi))


def distance_to_manifold(x, m: LinearManifold, scale: float) -> float | np.ndarray:
    """Euclidean distance from x to scale * {manifold points}.

    Equals || (I - P)(x - scale * offset) || with P the basis projector;
    batched rows give one distance per row.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    x = np.asarray(x, dtype=np.float64)
    diff = x - scale * m.offset
    tangential = (diff @ m.basis) @ m.basis.T
    resid = diff - tangential
    if x.ndim == 1:
        return float(np.linalg.norm(resid))
    return np.linalg.norm(resid, axis=-1)


def concentration_radius(s: NoiseSchedule, t: int, D: int, k: int) -> float:
    """Shell radius sqrt((1 - abar_t) (D - k)) of the noised manifold."""
    if not k < D:
        raise ConfigError(f"need k < D, got D={D}, k={k}")
    return float(np.sqrt((1.0 - s.alpha_bar(t)) * (D - k)))


def epsilon_band(delta: float, s: NoiseSchedule, t: int, D: int, k: int) -> float:
    """Relative width of the high-probability shell around the noised manifold.

    eps' = -log(delta / 2) / (D - k)
    eps  = min{1, sqrt(max{0, 1 - 2 sqrt(eps')})
               + (2 sqrt(eps') + 2 eps') / (sqrt(1 - abar_t) (D - k))}

    Always lies in (0, 1]; used as a one-sided sanity band, not a tight
    target (it is monotone decreasing in D - k only while 2 sqrt(eps') >= 1).
    """
    delta = check_in_range(delta, 0.0, 1.0, "delta", inclusive=(False, False))
    if not k < D:
        raise ConfigError(f"need k < D, got D={D}, k={k}")
    n = D - k
    eps_p = -np.log(delta / 2.0) / n
    sqrt_eps_p = np.sqrt(eps_p)
    first = np.sqrt(max(0.0, 1.0 - 2.0 * sqrt_eps_p))
    second = (2.0 * sqrt_eps_p + 2.0 * eps_p) / (np.sqrt(1.0 - s.alpha_bar(t)) * n)
    return float(min(1.0, first + second))


def tangent_residual(ae: LinearAutoencoder, latent_grad) -> float:
    """Norm of the off-tangent component of a decoded gradient direction.

    Zero (within float noise) whenever the basis is orthonormal, which is
    the perfect-autoencoder premise.
    """
    v = as_vector(latent_grad, ae.latent_dim, "latent_grad")
    ambient = ae.tangent_lift(v)
    tangential = (ambient @ ae.manifold.basis) @ ae.manifold.basis.T
    return float(np.linalg.norm(ambient - tangential))


# -- serialization ---------------------------------------------------------


def testbed_to_json(m: LinearManifold, g: LatentGaussian, seed: int) -> str:
    cov = g.covariance
    if not g.degenerate and np.allclose(cov, np.eye(g.dim), atol=0.0):
        cov_doc = "identity"
    else:
        cov_doc = [[float(v) for v in row] for row in cov]
    doc = {
        "D": m.ambient_dim,
        "k": m.intrinsic_dim,
        "seed": int(seed),
        "latent_mean": [float(v) for v in g.mean],
        "latent_cov": cov_doc,
        "offset": [float(v) for v in m.offset],
    }
    return json.dumps(doc, sort_keys=True)


def testbed_from_json(text: str) -> tuple[LinearManifold, LatentGaussian, int]:
    try:
        doc = json.loads(text)
        D, k, seed = int(doc["D"]), int(doc["k"]), int(doc["seed"])
        mean = np.asarray(doc["latent_mean"], dtype=np.float64)
        cov = np.eye(k) if doc["latent_cov"] == "identity" \
            else np.asarray(doc["latent_cov"], dtype=np.float64)
        offset = np.asarray(doc["offset"], dtype=np.float64)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad testbed document: {exc}") from exc
    m = make_manifold(D, k, seed=seed, offset=offset)
    degenerate = bool(np.max(np.abs(cov)) == 0.0)
    g = LatentGaussian(mean=mean, covariance=cov, degenerate=degenerate)
    return m, g, seed
