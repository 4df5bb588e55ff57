"""Discrete variance-preserving noise schedules and sampler coefficients.

Conventions used throughout the package:

* steps are 1-based, ``t in {1..T}``; ``t = 0`` denotes the clean sample
  and is assigned ``alpha_bar(0) = 1`` so the last backward update lands
  exactly on the clean estimate;
* ``alpha_t = 1 - beta_t`` and ``alpha_bar_t = prod_{s<=t} alpha_s``;
* sampler coefficients are kept in noise-prediction form: the backward
  mean is ``u * x0_ref + v * eps_hat`` with stochastic scale ``w``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FirstStepSigmaError, ShapeError
from .validation import check_in_range

__all__ = [
    "NoiseSchedule",
    "SamplerCoefficients",
    "build_linear_schedule",
    "ddim_sigma",
    "sampler_coefficients",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha/alpha_bar sequences for T discrete steps."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.betas.ndim != 1 or self.betas.shape[0] < 1:
            raise ConfigError("schedule needs at least one step")
        if self.alphas.shape != self.betas.shape or self.alpha_bars.shape != self.betas.shape:
            raise ShapeError("betas/alphas/alpha_bars must share one length")
        if not np.all((self.betas > 0.0) & (self.betas < 1.0)):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if not np.all((self.alpha_bars > 0.0) & (self.alpha_bars < 1.0)):
            raise ConfigError("alpha_bars must lie strictly inside (0, 1)")
        if not np.all(np.diff(self.alpha_bars) < 0.0):
            raise ConfigError("alpha_bars must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def beta(self, t: int) -> float:
        """beta_t for 1-based t."""
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """alpha_bar_t for t in {0..T}; t = 0 returns the clean-sample value 1."""
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    def _check_step(self, t: int):
        if not isinstance(t, (int, np.integer)) or not 1 <= t <= self.T:
            raise ConfigError(f"step index must lie in 1..{self.T}, got {t!r}")

    def to_config(self) -> dict:
        """Compact run-config form; the expanded arrays are never persisted."""
        return {
            "T": self.T,
            "beta_min": float(self.betas[0]),
            "beta_max": float(self.betas[-1]),
        }


@dataclass(frozen=True)
class SamplerCoefficients:
    """Backward-update coefficients (u, v, w) for one step, noise form."""

    u: float
    v: float
    w: float
    mode: str
    eta: float | None = None


def build_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linearly interpolated betas from beta_min to beta_max inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    beta_min = check_in_range(beta_min, 0.0, 1.0, "beta_min", inclusive=(False, False))
    beta_max = check_in_range(beta_max, 0.0, 1.0, "beta_max", inclusive=(False, False))
    if beta_min > beta_max:
        raise ConfigError("beta_min must not exceed beta_max")
    betas = np.linspace(beta_min, beta_max, int(T))
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def ddim_sigma(s: NoiseSchedule, t: int, eta: float, *, t_prev: int | None = None) -> float:
    """Stochasticity scale sigma_t for the backward step t -> t_prev.

    sigma_t = eta * sqrt((1 - abar_prev) / (1 - abar_t)) * sqrt(1 - abar_t / abar_prev)

    eta = 1 reproduces the DDPM posterior standard deviation and eta = 0
    is deterministic.  ``t_prev`` defaults to ``t - 1``; trajectories that
    subsample the schedule pass the previous *selected* step instead.
    """
    eta = check_in_range(eta, 0.0, 1.0, "eta")
    if t_prev is None:
        if t == 1:
            raise FirstStepSigmaError(
                "step t=1 has no predecessor; the final update uses sigma=0 by the "
                "alpha_bar(0)=1 convention"
            )
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ConfigError(f"t_prev must lie in [0, t), got {t_prev} for t={t}")
    abar_t = s.alpha_bar(t)
    abar_prev = s.alpha_bar(t_prev)
    ratio = abar_t / abar_prev
    return float(eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(max(0.0, 1.0 - ratio)))


def sampler_coefficients(s: NoiseSchedule, k: int, mode: str = "ddim",
                         eta: float = 0.0, *, k_prev: int | None = None) -> SamplerCoefficients:
    """Coefficients (u, v, w) of the backward mean/scale at step k.

    Noise form: the update is ``u * x0_ref + v * eps_hat + w * noise`` with

        u = sqrt(abar_{k-1})
        v = sqrt(1 - abar_{k-1} - sigma_k^2)
        w = sigma_k

    ``mode="ddpm"`` fixes sigma_k^2 = beta_k (1 - abar_{k-1}) / (1 - abar_k),
    identical to ``mode="ddim"`` at eta = 1.
    """
    if k_prev is None:
        k_prev = k - 1
    if mode == "ddpm":
        if k_prev == 0:
            sigma = 0.0
        elif k_prev == k - 1:
            sigma = float(np.sqrt(s.beta(k) * (1.0 - s.alpha_bar(k_prev)) / (1.0 - s.alpha_bar(k))))
        else:
            sigma = ddim_sigma(s, k, 1.0, t_prev=k_prev)
        eta_out = None
    elif mode == "ddim":
        sigma = 0.0 if k_prev == 0 else ddim_sigma(s, k, eta, t_prev=k_prev)
        eta_out = float(eta)
    else:
        raise ConfigError(f"unknown sampler mode {mode!r}")
    abar_prev = s.alpha_bar(k_prev)
    radicand = 1.0 - abar_prev - sigma * sigma
    if radicand < -1e-15:
        raise ConfigError(
            f"sigma^2={sigma * sigma:.3e} exceeds 1-abar_prev={1.0 - abar_prev:.3e} at step {k}"
        )
    v = float(np.sqrt(max(0.0, radicand)))
    return SamplerCoefficients(u=float(np.sqrt(abar_prev)), v=v, w=float(sigma),
                               mode=mode, eta=eta_out)
