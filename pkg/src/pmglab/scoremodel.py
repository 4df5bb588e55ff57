"""Noise-prediction network with time embedding, layer taps, and DSM training.

The network is kept in noise-prediction form: it outputs an estimate of the
standard-normal noise that produced ``x_t`` from the clean sample.  The
score of the noised marginal is reached only through `score_from_noise`,
which divides by ``-sqrt(1 - alpha_bar_t)``.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine
from .engine import Mlp, adam_step, backward, mlp_forward, new_mlp
from .errors import ConfigError, ShapeError, TrainingDiverged
from .schedule import NoiseSchedule, build_linear_schedule
from .validation import as_matrix, as_vector, check_finite, ensure_rng

__all__ = [
    "TimeEmbedding",
    "ScoreNetwork",
    "DsmConfig",
    "new_score_network",
    "predict_noise",
    "score_from_noise",
    "train_dsm",
    "save_score_network",
    "load_score_network",
]


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal features of t/T at fixed frequencies (sin and cos each)."""

    frequencies: tuple[float, ...] = (1.0, 4.641588833612779, 21.544346900318832, 100.0)

    def features(self, t: int, T: int) -> np.ndarray:
        tau = 2.0 * np.pi * float(t) / float(T)
        f = np.asarray(self.frequencies)
        return np.concatenate([np.sin(f * tau), np.cos(f * tau)])

    def features_batch(self, t: np.ndarray, T: int) -> np.ndarray:
        tau = 2.0 * np.pi * np.asarray(t, dtype=np.float64) / float(T)
        f = np.asarray(self.frequencies)
        angles = tau[:, None] * f[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    @property
    def dim(self) -> int:
        return 2 * len(self.frequencies)


@dataclass(frozen=True)
class ScoreNetwork:
    """MLP noise predictor over concat(state, time features) with taps.

    `tap_layers` names the hidden layers whose post-activation outputs are
    exposed as features next to the noise estimate.
    """

    trunk: Mlp
    time_embedding: TimeEmbedding
    state_dim: int
    tap_layers: tuple[int, ...]
    schedule_config: dict
    seed: int = 0

    def __post_init__(self):
        want_in = self.state_dim + self.time_embedding.dim
        if self.trunk.input_dim != want_in:
            raise ShapeError(
                f"trunk input dim {self.trunk.input_dim} != state+time dim {want_in}"
            )
        if self.trunk.output_dim != self.state_dim:
            raise ShapeError("trunk must map back to the state dimension")
        n_hidden = len(self.trunk.layers) - 1
        taps = tuple(sorted(self.tap_layers))
        if any(not 0 <= i < n_hidden for i in taps):
            raise ConfigError(f"tap layers {taps} outside hidden range 0..{n_hidden - 1}")
        object.__setattr__(self, "tap_layers", taps)

    @property
    def T(self) -> int:
        return int(self.schedule_config["T"])

    def schedule(self) -> NoiseSchedule:
        c = self.schedule_config
        return build_linear_schedule(c["T"], c["beta_min"], c["beta_max"])


def new_score_network(state_dim: int, hidden: tuple[int, ...], schedule_config: dict,
                      seed: int = 0, tap_layers: tuple[int, ...] | None = None,
                      frequencies: tuple[float, ...] | None = None) -> ScoreNetwork:
    emb = TimeEmbedding() if frequencies is None else TimeEmbedding(tuple(frequencies))
    dims = [state_dim + emb.dim, *hidden, state_dim]
    trunk = new_mlp(dims, "tanh", seed=seed)
    if tap_layers is None:
        tap_layers = tuple(range(len(hidden)))  # all hidden layers
    return ScoreNetwork(trunk=trunk, time_embedding=emb, state_dim=state_dim,
                        tap_layers=tuple(tap_layers), schedule_config=dict(schedule_config),
                        seed=seed)


def predict_noise(net: ScoreNetwork, x_t, t: int) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Noise estimate plus the tapped hidden activations at step t."""
    x_t = check_finite(as_vector(x_t, net.state_dim, "x_t"), "x_t")
    if not 1 <= t <= net.T:
        raise ConfigError(f"t must lie in 1..{net.T}, got {t}")
    feats = net.time_embedding.features(t, net.T)
    y, acts, _ = mlp_forward(net.trunk, np.concatenate([x_t, feats]))
    taps = {i: acts[i] for i in net.tap_layers}
    return y, taps


def _predict_noise_batch(net: ScoreNetwork, X: np.ndarray, t: np.ndarray) -> np.ndarray:
    feats = net.time_embedding.features_batch(t, net.T)
    y, _, _ = mlp_forward(net.trunk, np.concatenate([X, feats], axis=1))
    return y


def score_from_noise(eps_hat, s: NoiseSchedule, t: int) -> np.ndarray:
    """Bridge to score form: score = -eps_hat / sqrt(1 - alpha_bar_t)."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    abar = s.alpha_bar(t)
    if abar >= 1.0:
        raise ConfigError(f"alpha_bar({t}) = 1 makes the score undefined")
    return -eps_hat / np.sqrt(1.0 - abar)


@dataclass(frozen=True)
class DsmConfig:
    """Denoising-score-matching run settings; the seed pins everything."""

    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("DsmConfig fields must be positive (epochs may be 0)")


def train_dsm(net: ScoreNetwork, dataset, s: NoiseSchedule,
              cfg: DsmConfig) -> tuple[ScoreNetwork, list[float]]:
    """Minimize E || eps_hat(sqrt(abar_t) x0 + sqrt(1-abar_t) eps, t) - eps ||^2.

    Timesteps are drawn uniformly from {1..T}.  Returns a trained copy of
    the network and the per-batch loss curve; the input network is left
    untouched.
    """
    X0 = as_matrix(dataset, (None, net.state_dim), "dataset")
    if X0.shape[0] == 0:
        raise ConfigError("dataset must be non-empty")
    if s.T != net.T:
        raise ConfigError("schedule T differs from the network's schedule")
    rng = ensure_rng(cfg.seed)
    params = {k: v.copy() for k, v in net.trunk.params().items()}
    trunk = net.trunk
    state = None
    losses: list[float] = []
    n = X0.shape[0]
    sqrt_abar = np.sqrt(s.alpha_bars)
    sqrt_1m = np.sqrt(1.0 - s.alpha_bars)

    batches_per_epoch = max(1, n // cfg.batch_size)
    for _ in range(cfg.epochs):
        for _ in range(batches_per_epoch):
            idx = rng.integers(0, n, size=cfg.batch_size)
            t = rng.integers(1, s.T + 1, size=cfg.batch_size)
            eps = rng.standard_normal((cfg.batch_size, net.state_dim))
            x0 = X0[idx]
            xt = sqrt_abar[t - 1, None] * x0 + sqrt_1m[t - 1, None] * eps
            inputs = np.concatenate([xt, net.time_embedding.features_batch(t, net.T)], axis=1)

            model = trunk.with_params(params)
            _, _, tape = mlp_forward(model, inputs, record=True)
            resid = tape.sub(tape.output, tape.constant(eps))
            loss_node = tape.scale(tape.sum_squares(resid), 1.0 / cfg.batch_size)
            tape.finalize(loss_node)
            loss = float(tape.value(loss_node))
            losses.append(loss)
            if not np.isfinite(loss) or loss > cfg.divergence_threshold:
                raise TrainingDiverged(
                    f"DSM loss diverged to {loss}",
                    diagnostics={"loss": loss, "batches_done": len(losses)},
                )
            node_grads = backward(tape)
            grads = {key: node_grads[node] for key, node in tape.param_nodes.items()}
            params, state = adam_step(params, grads, state, lr=cfg.learning_rate)

    trained = replace(net, trunk=trunk.with_params(params))
    return trained, losses


def train_dsm_staged(net: ScoreNetwork, dataset, s: NoiseSchedule,
                     stages: tuple[tuple[int, float], ...] = ((400, 3e-3), (400, 1e-3), (400, 3e-4)),
                     batch_size: int = 256, seed: int = 0) -> tuple[ScoreNetwork, list[float]]:
    """Run `train_dsm` through a fixed learning-rate staircase.

    The late low-rate stages matter for accuracy at small timesteps, where
    the implied score is stiff.
    """
    losses: list[float] = []
    for i, (epochs, lr) in enumerate(stages):
        cfg = DsmConfig(epochs=epochs, batch_size=batch_size, learning_rate=lr, seed=seed + i)
        net, stage_losses = train_dsm(net, dataset, s, cfg)
        losses.extend(stage_losses)
    return net, losses


# -- persistence ----------------------------------------------------------


def save_score_network(path_prefix, net: ScoreNetwork) -> tuple[str, str]:
    """Writes <prefix>.pmgl (trunk weights) and <prefix>.json (sidecar)."""
    ckpt = f"{path_prefix}.pmgl"
    sidecar = f"{path_prefix}.json"
    engine.save_checkpoint(ckpt, net.trunk)
    doc = {
        "state_dim": net.state_dim,
        "frequencies": list(net.time_embedding.frequencies),
        "tap_layers": list(net.tap_layers),
        "schedule": dict(net.schedule_config),
        "seed": net.seed,
    }
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return ckpt, sidecar


def load_score_network(path_prefix) -> ScoreNetwork:
    ckpt = f"{path_prefix}.pmgl"
    sidecar = f"{path_prefix}.json"
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read score-network sidecar {sidecar}: {exc}") from exc
    trunk = engine.load_checkpoint(ckpt)
    emb = TimeEmbedding(tuple(float(f) for f in doc["frequencies"]))
    return ScoreNetwork(trunk=trunk, time_embedding=emb,
                        state_dim=int(doc["state_dim"]),
                        tap_layers=tuple(int(i) for i in doc["tap_layers"]),
                        schedule_config=dict(doc["schedule"]),
                        seed=int(doc.get("seed", 0)))
