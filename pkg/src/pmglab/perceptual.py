"""Perceptual feature extractors and the two guidance losses.

G1 is squared-error data consistency between the decoded clean estimate
and the measurement; G2 is squared-error consistency between extractor
features of the decoded estimate and cached features of the measurement.
Both use the plain ||a - b||^2 convention (no 1/2 factor), and both are
differentiated at the supplied latent point through the (linear) decoder,
the mlp and self-feature kinds via the reverse-mode tape.

Extractor kinds:

* ``none`` — no features; G2 is identically zero (the no-guidance row);
* ``identity`` — raw ambient coordinates;
* ``linear`` — a fixed random matrix of features;
* ``mlp`` — a small fixed random network (weak external features);
* ``scorenet`` — self-features: layer taps of an unguided sampling pass
  by the project's own noise predictor, mirroring the use of the
  backbone's own activations as the perceptual reference.
"""

from dataclasses import dataclass, field

import numpy as np

from ._steps import forward_diffuse
from .engine import Mlp, Tape, backward, mlp_forward, new_mlp, tape_mlp
from .errors import ConfigError, NumericalAbort, ShapeError
from .manifold import LinearAutoencoder
from .schedule import sampler_coefficients
from .scoremodel import ScoreNetwork, predict_noise
from .validation import as_vector, ensure_rng

__all__ = [
    "PerceptualExtractor",
    "make_extractor",
    "precompute_targets",
    "psi_apply",
    "g1_value_grad",
    "g2_value_grad",
    "GuidanceLossReport",
]

KINDS = ("none", "identity", "linear", "mlp", "scorenet")


@dataclass
class PerceptualExtractor:
    """Feature map psi plus the cached target features of one measurement.

    The cache (and the per-block scales when `normalize_blocks` is on) is
    owned by a single measurement at a time; guided steps require it.
    """

    kind: str
    matrix: np.ndarray | None = None
    mlp: Mlp | None = None
    net: ScoreNetwork | None = None
    run_cfg: object | None = None
    normalize_blocks: bool = False
    seed: int = 0
    target: np.ndarray | None = None
    block_scales: list[float] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown extractor kind {self.kind!r}")

    @property
    def has_target(self) -> bool:
        return self.kind == "none" or self.target is not None


@dataclass(frozen=True)
class GuidanceLossReport:
    g1: float
    g2: float
    g1_grad_norm: float
    g2_grad_norm: float

    def __post_init__(self):
        if self.g1 < 0 or self.g2 < 0:
            raise ConfigError("guidance losses are non-negative by construction")


def make_extractor(kind: str, ambient_dim: int | None = None, *, feature_dim: int = 16,
                   hidden: tuple[int, ...] = (32,), seed: int = 0,
                   net: ScoreNetwork | None = None, run_cfg=None,
                   normalize_blocks: bool = False) -> PerceptualExtractor:
    """Build one of the psi variants; `linear`/`mlp` draw fixed seeded maps."""
    if kind in ("none", "identity"):
        return PerceptualExtractor(kind=kind, seed=seed, normalize_blocks=normalize_blocks)
    if kind == "linear":
        if ambient_dim is None:
            raise ConfigError("linear extractor needs ambient_dim")
        rng = ensure_rng(seed)
        matrix = rng.standard_normal((feature_dim, ambient_dim)) / np.sqrt(ambient_dim)
        return PerceptualExtractor(kind=kind, matrix=matrix, seed=seed,
                                   normalize_blocks=normalize_blocks)
    if kind == "mlp":
        if ambient_dim is None:
            raise ConfigError("mlp extractor needs ambient_dim")
        mlp = new_mlp([ambient_dim, *hidden, feature_dim], "tanh", seed=seed,
                      final_activation="tanh")
        return PerceptualExtractor(kind=kind, mlp=mlp, seed=seed,
                                   normalize_blocks=normalize_blocks)
    if kind == "scorenet":
        if net is None or run_cfg is None:
            raise ConfigError("scorenet extractor needs a network and a run config")
        return PerceptualExtractor(kind=kind, net=net, run_cfg=run_cfg, seed=seed,
                                   normalize_blocks=normalize_blocks)
    raise ConfigError(f"unknown extractor kind {kind!r}")


# -- feature evaluation ----------------------------------------------------


def _raw_blocks(extractor: PerceptualExtractor, v: np.ndarray,
                ae: LinearAutoencoder | None) -> list[np.ndarray]:
    """Feature blocks of an ambient vector, plain numpy path."""
    if extractor.kind == "none":
        return []
    if extractor.kind == "identity":
        return [v]
    if extractor.kind == "linear":
        return [extractor.matrix @ v]
    if extractor.kind == "mlp":
        y, _, _ = mlp_forward(extractor.mlp, v)
        return [y]
    if ae is None:
        raise ConfigError("scorenet extractor needs the autoencoder")
    return [vec for _, vec in _scorenet_taps(extractor, v, ae)]


def _scorenet_taps(extractor: PerceptualExtractor, v: np.ndarray,
                   ae: LinearAutoencoder) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Taps of an unguided sampling pass over v, ordered t desc / layer asc.

    Arithmetic matches the guided sampler loop step for step so the cache
    equals the hyperfeatures of a zero-guidance run from the same seed.
    """
    net, rc = extractor.net, extractor.run_cfg
    s = net.schedule()
    ts = rc.timesteps()
    rng = ensure_rng(rc.seed)
    z = ae.encode(v)
    if rc.renoise_start:
        z = forward_diffuse(z, s, ts[0], rng.standard_normal(z.shape[0]))
    out = []
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat, taps = predict_noise(net, z, t)
        for layer in sorted(taps):
            out.append(((t, layer), taps[layer]))
        coef = sampler_coefficients(s, t, mode="ddim", eta=rc.eta, k_prev=t_prev)
        abar = s.alpha_bar(t)
        z0 = (z - np.sqrt(1.0 - abar) * eps_hat) * (1.0 / np.sqrt(abar))
        z = coef.u * z0 + coef.v * eps_hat
        if coef.w > 0.0:
            z = z + coef.w * rng.standard_normal(z.shape[0])
    return out


def _tape_blocks(extractor: PerceptualExtractor, tape: Tape, v_node: int,
                 ae: LinearAutoencoder | None) -> list[int]:
    """Feature blocks as tape nodes, mirroring `_raw_blocks`."""
    if extractor.kind == "none":
        return []
    if extractor.kind == "identity":
        return [v_node]
    if extractor.kind == "linear":
        return [tape.affine(v_node, tape.constant(extractor.matrix), None)]
    if extractor.kind == "mlp":
        out, _ = tape_mlp(tape, extractor.mlp, v_node)
        return [out]
    if ae is None:
        raise ConfigError("scorenet extractor needs the autoencoder")
    net, rc = extractor.net, extractor.run_cfg
    s = net.schedule()
    ts = rc.timesteps()
    rng = ensure_rng(rc.seed)
    basis = ae.manifold.basis
    # encode: z = B^T (v - offset)
    z_node = tape.affine(v_node, tape.constant(basis.T),
                         tape.constant(-(basis.T @ ae.manifold.offset)))
    k = ae.latent_dim
    if rc.renoise_start:
        abar_top = s.alpha_bar(ts[0])
        noise = rng.standard_normal(k)
        z_node = tape.add(tape.scale(z_node, np.sqrt(abar_top)),
                          tape.constant(np.sqrt(1.0 - abar_top) * noise))
    blocks = []
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        feats = net.time_embedding.features(t, net.T)
        trunk_in = tape.concat([z_node, tape.constant(feats)])
        eps_node, act_nodes = tape_mlp(tape, net.trunk, trunk_in)
        for layer in net.tap_layers:
            blocks.append(act_nodes[layer])
        coef = sampler_coefficients(s, t, mode="ddim", eta=rc.eta, k_prev=t_prev)
        abar = s.alpha_bar(t)
        z0_node = tape.scale(tape.sub(z_node, tape.scale(eps_node, np.sqrt(1.0 - abar))),
                             1.0 / np.sqrt(abar))
        z_node = tape.add(tape.scale(z0_node, coef.u), tape.scale(eps_node, coef.v))
        if coef.w > 0.0:
            z_node = tape.add(z_node, tape.constant(coef.w * rng.standard_normal(k)))
    return blocks


def precompute_targets(extractor: PerceptualExtractor, x,
                       ae: LinearAutoencoder | None = None) -> np.ndarray:
    """Cache target features of the measurement (and per-block scales)."""
    if extractor.kind == "none":
        extractor.target = np.zeros(0)
        extractor.block_scales = []
        return extractor.target
    x = np.asarray(x, dtype=np.float64)
    blocks = _raw_blocks(extractor, x, ae)
    if extractor.normalize_blocks:
        scales = []
        for b in blocks:
            std = float(np.std(b))
            scales.append(1.0 / std if std > 0 else 1.0)
    else:
        scales = [1.0] * len(blocks)
    extractor.block_scales = scales
    extractor.target = np.concatenate([s * b for s, b in zip(scales, blocks)]) \
        if blocks else np.zeros(0)
    return extractor.target


def psi_apply(extractor: PerceptualExtractor, v, ae: LinearAutoencoder | None = None) -> np.ndarray:
    """Scaled, concatenated features of an ambient vector."""
    v = np.asarray(v, dtype=np.float64)
    if extractor.kind == "none":
        return np.zeros(0)
    blocks = _raw_blocks(extractor, v, ae)
    scales = extractor.block_scales
    if scales is None:
        if extractor.normalize_blocks:
            raise ConfigError("normalize_blocks requires precomputed targets")
        scales = [1.0] * len(blocks)
    return np.concatenate([s * b for s, b in zip(scales, blocks)])


# -- guidance losses ---------------------------------------------------------


def g1_value_grad(z0_hat, y, ae) -> tuple[float, np.ndarray]:
    """Data-consistency loss ||decode(z) - y||^2 and its latent gradient.

    The decoder is affine, so the chain rule reduces to the basis
    transpose: grad = 2 B^T (decode(z) - y).
    """
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    decoded = ae.decode(z0_hat)
    y = as_vector(y, decoded.shape[0], "y")
    resid = decoded - y
    value = float(resid @ resid)
    grad = 2.0 * ae.pullback(resid)
    return value, grad


def g2_value_grad(z0_hat, extractor: PerceptualExtractor, ae,
                  want_grad: bool = True) -> tuple[float, np.ndarray]:
    """Perceptual-consistency loss ||psi(decode(z)) - psi(y)||^2 and gradient.

    Reverse mode through the decoder and the extractor; `kind="none"`
    returns exact zeros.  Requires `precompute_targets` first.
    """
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    if extractor.kind == "none":
        return 0.0, np.zeros_like(z0_hat)
    if extractor.target is None:
        raise ConfigError("extractor targets not precomputed for this measurement")

    tape = Tape()
    z_node = tape.leaf(z0_hat)
    basis = ae.manifold.basis
    decoded = tape.affine(z_node, tape.constant(basis), tape.constant(ae.manifold.offset))
    blocks = _tape_blocks(extractor, tape, decoded, ae)
    scaled = [tape.scale(b, s) if s != 1.0 else b
              for b, s in zip(blocks, extractor.block_scales)]
    feats = scaled[0] if len(scaled) == 1 else tape.concat(scaled)
    resid = tape.sub(feats, tape.constant(extractor.target))
    loss_node = tape.sum_squares(resid)
    tape.finalize(loss_node)
    value = float(tape.value(loss_node))
    if not want_grad:
        return value, np.zeros_like(z0_hat)
    grad = backward(tape)[z_node]
    if not np.all(np.isfinite(grad)):
        raise NumericalAbort("non-finite perceptual guidance gradient",
                             diagnostics={"kind": extractor.kind})
    return value, grad
