"""Hyperfeature pooling, the quality regression head, and rank correlations.

The regression head is an sklearn-compatible estimator so the feature
pipeline composes with Pipeline / GridSearchCV.  Correlations are computed
with raw-moment formulas in plain sequential float arithmetic, which keeps
them exactly reproducible against rational-arithmetic reference
implementations on small integer-valued inputs.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import engine
from .engine import backward, mlp_forward, new_mlp
from .errors import ConfigError, ShapeError, TrainingDiverged
from .validation import as_matrix, as_vector, ensure_rng

__all__ = [
    "Hyperfeatures",
    "aggregate",
    "midranks",
    "plcc",
    "srcc",
    "CorrelationReport",
    "correlation_report",
    "QualityRegressor",
    "save_head",
    "load_head",
]

POOLINGS = ("concat", "mean-over-time", "per-layer-mean")


@dataclass(frozen=True)
class Hyperfeatures:
    """Features keyed by (timestep, layer) plus one pooled vector.

    Pooled ordering is deterministic: timesteps descending, layers
    ascending, independent of insertion order.
    """

    entries: dict[tuple[int, int], np.ndarray]
    pooled: np.ndarray
    pooling: str

    @property
    def timesteps(self) -> tuple[int, ...]:
        return tuple(sorted({t for t, _ in self.entries}, reverse=True))

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted({l for _, l in self.entries}))


def aggregate(taps_by_step, pooling: str = "concat") -> Hyperfeatures:
    """Pool per-step layer taps into one feature vector.

    `taps_by_step` is an iterable of ``(t, {layer: vector})`` pairs.
    Pooling modes: ``concat`` joins every (t, layer) block; ``mean-over-time``
    averages each layer across timesteps then joins layers;
    ``per-layer-mean`` reduces each (t, layer) block to its scalar mean.
    """
    if pooling not in POOLINGS:
        raise ConfigError(f"unknown pooling {pooling!r}; choose from {POOLINGS}")
    entries: dict[tuple[int, int], np.ndarray] = {}
    for t, taps in taps_by_step:
        for layer, vec in taps.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.ndim != 1:
                raise ShapeError(f"tap ({t},{layer}) must be 1-D")
            entries[(int(t), int(layer))] = vec
    if not entries:
        raise ConfigError("no taps to aggregate")

    ts = sorted({t for t, _ in entries}, reverse=True)
    layers = sorted({l for _, l in entries})
    for layer in layers:
        dims = {entries[(t, layer)].shape[0] for t in ts if (t, layer) in entries}
        if len(dims) > 1:
            raise ShapeError(f"layer {layer} has ragged feature dims across timesteps: {dims}")

    if pooling == "concat":
        pooled = np.concatenate([entries[(t, layer)] for t in ts for layer in layers
                                 if (t, layer) in entries])
    elif pooling == "mean-over-time":
        pooled = np.concatenate([
            np.mean([entries[(t, layer)] for t in ts if (t, layer) in entries], axis=0)
            for layer in layers
        ])
    else:  # per-layer-mean: one scalar per (t, layer) block
        pooled = np.array([float(np.mean(entries[(t, layer)]))
                           for t in ts for layer in layers if (t, layer) in entries])
    return Hyperfeatures(entries=entries, pooled=pooled, pooling=pooling)


# -- correlations ----------------------------------------------------------


def midranks(xs) -> list[float]:
    """Average ranks (1-based); tied values share the mean of their positions."""
    xs = [float(v) for v in xs]
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        rank = (i + j) / 2.0 + 1.0  # mean of 1-based positions i+1 .. j+1
        for idx in order[i:j + 1]:
            ranks[idx] = rank
        i = j + 1
    return ranks


def _pearson_raw(xs: list[float], ys: list[float]) -> float:
    n = len(xs)
    sx = sy = sxx = syy = sxy = 0.0
    for x, y in zip(xs, ys):
        sx += x
        sy += y
        sxx += x * x
        syy += y * y
        sxy += x * y
    num = n * sxy - sx * sy
    den = (n * sxx - sx * sx) * (n * syy - sy * sy)
    if den <= 0.0:
        return math.nan
    return num / math.sqrt(den)


def plcc(xs, ys) -> float:
    """Pearson correlation; NaN marks the undefined zero-variance case."""
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    if len(xs) != len(ys):
        raise ShapeError("sequences must have equal length")
    if len(xs) < 3:
        raise ConfigError("need at least 3 points for a correlation")
    if min(xs) == max(xs) or min(ys) == max(ys):
        return math.nan
    return _pearson_raw(xs, ys)


def srcc(xs, ys) -> float:
    """Spearman rank correlation: Pearson on average ranks (ties get mean rank)."""
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    if len(xs) != len(ys):
        raise ShapeError("sequences must have equal length")
    if len(xs) < 3:
        raise ConfigError("need at least 3 points for a correlation")
    if min(xs) == max(xs) or min(ys) == max(ys):
        return math.nan
    return _pearson_raw(midranks(xs), midranks(ys))


@dataclass(frozen=True)
class CorrelationReport:
    plcc: float
    srcc: float
    n: int

    def __post_init__(self):
        for name in ("plcc", "srcc"):
            v = getattr(self, name)
            if not (math.isnan(v) or abs(v) <= 1.0 + 1e-12):
                raise ConfigError(f"{name} out of [-1, 1]: {v}")


def correlation_report(true_scores, predicted_scores) -> CorrelationReport:
    xs = [float(v) for v in true_scores]
    ys = [float(v) for v in predicted_scores]
    return CorrelationReport(plcc=plcc(xs, ys), srcc=srcc(xs, ys), n=len(xs))


# -- the regression head ----------------------------------------------------


class QualityRegressor(BaseEstimator, RegressorMixin):
    """Quality head over pooled hyperfeatures.

    kind="ridge" solves (Z^T Z + lam I)^{-1} Z^T (y - mean(y)) on
    z-normalized features in closed form (deterministic default);
    kind="mlp" trains a two-hidden-layer network with squared loss and a
    fixed seed.  Normalization statistics freeze at fit time; columns with
    zero training variance are dropped (their weight is exactly 0).
    """

    def __init__(self, kind: str = "ridge", lam: float = 1e-3, hidden: int = 64,
                 epochs: int = 300, learning_rate: float = 1e-3, seed: int = 0):
        self.kind = kind
        self.lam = lam
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y):
        X = as_matrix(X, name="X")
        y = as_vector(y, X.shape[0], "y")
        if self.kind not in ("ridge", "mlp"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if len(set(y.tolist())) < 2:
            raise ConfigError("need at least 2 distinct score values")
        if self.kind == "ridge" and not self.lam > 0:
            raise ConfigError("ridge lambda must be > 0")

        mu = X.mean(axis=0)
        sigma = X.std(axis=0)
        keep = sigma > 0.0
        self.mu_ = mu
        self.sigma_ = np.where(keep, sigma, 1.0)
        self.keep_ = keep
        Z = (X[:, keep] - mu[keep]) / sigma[keep]

        if self.kind == "ridge":
            self.bias_ = float(y.mean())
            yc = y - self.bias_
            k = Z.shape[1]
            w = np.linalg.solve(Z.T @ Z + self.lam * np.eye(k), Z.T @ yc)
            full = np.zeros(X.shape[1])
            full[keep] = w
            self.weights_ = full
            self.net_ = None
        else:
            self._fit_mlp(Z, y)
        self.n_features_in_ = X.shape[1]
        return self

    def _fit_mlp(self, Z, y):
        rng = ensure_rng(self.seed)
        n, d = Z.shape
        net = new_mlp([d, self.hidden, self.hidden, 1], "tanh", seed=self.seed)
        params = {k: v.copy() for k, v in net.params().items()}
        state = None
        batch = min(64, n)
        for _ in range(self.epochs):
            idx = rng.integers(0, n, size=batch)
            model = net.with_params(params)
            _, _, tape = mlp_forward(model, Z[idx], record=True)
            resid = tape.sub(tape.output, tape.constant(y[idx][:, None]))
            loss_node = tape.scale(tape.sum_squares(resid), 1.0 / batch)
            tape.finalize(loss_node)
            loss = float(tape.value(loss_node))
            if not np.isfinite(loss) or loss > 1e9:
                raise TrainingDiverged(f"head training diverged to {loss}")
            node_grads = backward(tape)
            grads = {key: node_grads[node] for key, node in tape.param_nodes.items()}
            params, state = engine.adam_step(params, grads, state, lr=self.learning_rate)
        self.net_ = net.with_params(params)
        self.weights_ = None
        self.bias_ = 0.0

    def predict(self, X):
        X = as_matrix(X, (None, getattr(self, "n_features_in_", None)), "X")
        Z = np.where(self.keep_, (X - self.mu_) / self.sigma_, 0.0)
        if self.net_ is None:
            return Z @ self.weights_ + self.bias_
        y, _, _ = mlp_forward(self.net_, Z[:, self.keep_])
        return y[:, 0]

    def predict_one(self, features) -> float:
        """Score a single pooled hyperfeature vector."""
        vec = np.asarray(features, dtype=np.float64)
        return float(self.predict(vec[None, :])[0])


def save_head(path_prefix, head: QualityRegressor) -> tuple[str, str]:
    """Writes <prefix>.pmgl (weights) and <prefix>.json (normalization)."""
    if head.net_ is None:
        net = engine.Mlp(layers=(engine.Layer(weight=head.weights_[None, :],
                                              bias=np.array([head.bias_])),))
    else:
        net = head.net_
    ckpt, sidecar = f"{path_prefix}.pmgl", f"{path_prefix}.json"
    engine.save_checkpoint(ckpt, net)
    doc = {
        "kind": head.kind,
        "lambda": head.lam,
        "norm_mu": [float(v) for v in head.mu_],
        "norm_sigma": [float(v) for v in head.sigma_],
        "keep": [bool(v) for v in head.keep_],
    }
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return ckpt, sidecar


def load_head(path_prefix) -> QualityRegressor:
    try:
        with open(f"{path_prefix}.json", "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read head sidecar: {exc}") from exc
    net = engine.load_checkpoint(f"{path_prefix}.pmgl")
    head = QualityRegressor(kind=doc["kind"], lam=doc["lambda"])
    head.mu_ = np.asarray(doc["norm_mu"], dtype=np.float64)
    head.sigma_ = np.asarray(doc["norm_sigma"], dtype=np.float64)
    head.keep_ = np.asarray(doc["keep"], dtype=bool)
    head.n_features_in_ = head.mu_.shape[0]
    if doc["kind"] == "ridge":
        head.weights_ = net.layers[0].weight[0]
        head.bias_ = float(net.layers[0].bias[0])
        head.net_ = None
    else:
        head.net_ = net
        head.weights_ = None
        head.bias_ = 0.0
    return head
