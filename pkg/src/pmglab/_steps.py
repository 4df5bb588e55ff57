"""Shared step primitives for forward noising, Tweedie, and DDIM updates.

Kept in one place so the sampler loop and the feature extractor's internal
unguided pass perform bit-identical arithmetic.
"""

import numpy as np

from .errors import ConfigError, ShapeError
from .schedule import NoiseSchedule, sampler_coefficients


def forward_diffuse(x0, s: NoiseSchedule, t: int, noise) -> np.ndarray:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; t = 0 returns x0 unchanged."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    abar = s.alpha_bar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def tweedie_estimate(x_t, eps_hat, s: NoiseSchedule, t: int) -> np.ndarray:
    """Posterior-mean reconstruction (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != x_t.shape:
        raise ShapeError(f"eps_hat shape {eps_hat.shape} != x_t shape {x_t.shape}")
    abar = s.alpha_bar(t)
    if abar <= 0.0:
        raise ConfigError(f"alpha_bar({t}) must be positive")
    inv = 1.0 / np.sqrt(abar)
    return (x_t - np.sqrt(1.0 - abar) * eps_hat) * inv


def ddim_step(z_t, z0_ref, eps_hat, s: NoiseSchedule, t: int, eta: float,
              noise=None, *, t_prev: int | None = None) -> np.ndarray:
    """One backward update u * z0_ref + v * eps_hat + w * noise.

    `z0_ref` is the clean reference (the Tweedie estimate for plain
    sampling, the guided estimate otherwise).  ``t_prev`` names the
    destination step and defaults to ``t - 1``; passing 0 lands exactly on
    `z0_ref` by the alpha_bar(0) = 1 convention.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    z0_ref = np.asarray(z0_ref, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z0_ref.shape != z_t.shape or eps_hat.shape != z_t.shape:
        raise ShapeError("z_t, z0_ref and eps_hat must share one shape")
    coef = sampler_coefficients(s, t, mode="ddim", eta=eta, k_prev=t_prev)
    out = coef.u * z0_ref + coef.v * eps_hat
    if coef.w > 0.0:
        if noise is None:
            raise ConfigError("stochastic step (w > 0) requires a noise draw")
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != z_t.shape:
            raise ShapeError("noise shape mismatch")
        out = out + coef.w * noise
    return out
