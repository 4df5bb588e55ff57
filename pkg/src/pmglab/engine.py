"""Dense MLP forward passes with a reverse-mode tape, Adam, and checkpoints.

The tape records one node per matrix-level operation.  Values are float64
numpy arrays; recording never changes the arithmetic of the forward pass,
so recorded and unrecorded evaluations agree bitwise.

Activations are restricted to smooth maps (identity, tanh, smooth_relu)
so gradients can always be validated against central finite differences.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, NumericalAbort, ShapeError, UnfinalizedTapeError
from .validation import ensure_rng

__all__ = [
    "ACTIVATIONS",
    "Layer",
    "Mlp",
    "Tape",
    "backward",
    "mlp_forward",
    "AdamState",
    "adam_step",
    "new_mlp",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("identity", "tanh", "smooth_relu")
_ACT_TAGS = {name: i for i, name in enumerate(ACTIVATIONS)}

_MAGIC = b"PMGL"
_FORMAT_VERSION = 1


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "tanh":
        return np.tanh(x)
    if name == "smooth_relu":
        # softplus: log(1 + exp(x)), computed stably
        return np.logaddexp(0.0, x)
    raise ValueError(f"unknown activation {name!r}")


def _activation_deriv_from_output(name: str, y: np.ndarray) -> np.ndarray:
    """Derivative of the activation expressed through its own output."""
    if name == "identity":
        return np.ones_like(y)
    if name == "tanh":
        return 1.0 - y * y
    if name == "smooth_relu":
        # d/dx softplus(x) = sigmoid(x) = 1 - exp(-softplus(x))
        return 1.0 - np.exp(-y)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class Layer:
    """One affine layer: y = act(weight @ x + bias), weight is (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ShapeError(f"layer shapes inconsistent: weight {w.shape}, bias {b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class Mlp:
    """A chain of affine+activation layers over float64 vectors."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{i}.w"] = layer.weight
            out[f"{i}.b"] = layer.bias
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "Mlp":
        layers = [
            Layer(weight=params[f"{i}.w"], bias=params[f"{i}.b"], activation=layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return Mlp(layers=tuple(layers))


class _Node:
    __slots__ = ("op", "parents", "value", "ctx", "requires_grad")

    def __init__(self, op, parents, value, ctx, requires_grad):
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx
        self.requires_grad = requires_grad


class Tape:
    """Append-only record of matrix-level operations.

    Node parents always reference earlier nodes, so the graph is acyclic by
    construction.  `finalize` pins the output node; `backward` refuses to
    run before that.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.output: int | None = None

    def _push(self, op, parents, value, ctx=None) -> int:
        requires = any(self.nodes[p].requires_grad for p in parents)
        self.nodes.append(_Node(op, tuple(parents), value, ctx, requires))
        return len(self.nodes) - 1

    def value(self, i: int) -> np.ndarray:
        return self.nodes[i].value

    def constant(self, value) -> int:
        node = _Node("const", (), np.asarray(value, dtype=np.float64), None, False)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value) -> int:
        node = _Node("leaf", (), np.asarray(value, dtype=np.float64), None, True)
        self.nodes.append(node)
        return len(self.nodes) - 1

    # -- operations ------------------------------------------------------

    def affine(self, x: int, w: int, b: int | None) -> int:
        """w @ x (+ b) for 1-D x, or x @ w.T (+ b) row-wise for 2-D x."""
        xv, wv = self.value(x), self.value(w)
        if xv.ndim == 1:
            out = wv @ xv
        elif xv.ndim == 2:
            out = xv @ wv.T
        else:
            raise ShapeError(f"affine input must be 1-D or 2-D, got {xv.shape}")
        if b is not None:
            out = out + self.value(b)
        return self._push("affine", (x, w) if b is None else (x, w, b), out)

    def add(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise ShapeError(f"add shapes differ: {av.shape} vs {bv.shape}")
        return self._push("add", (a, b), av + bv)

    def sub(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise ShapeError(f"sub shapes differ: {av.shape} vs {bv.shape}")
        return self._push("sub", (a, b), av - bv)

    def mul(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise ShapeError(f"mul shapes differ: {av.shape} vs {bv.shape}")
        return self._push("mul", (a, b), av * bv)

    def scale(self, a: int, c: float) -> int:
        return self._push("scale", (a,), self.value(a) * float(c), ctx=float(c))

    def tanh(self, a: int) -> int:
        return self._push("tanh", (a,), np.tanh(self.value(a)))

    def smooth_relu(self, a: int) -> int:
        return self._push("smooth_relu", (a,), np.logaddexp(0.0, self.value(a)))

    def activation(self, name: str, a: int) -> int:
        if name == "identity":
            return a
        if name == "tanh":
            return self.tanh(a)
        if name == "smooth_relu":
            return self.smooth_relu(a)
        raise ValueError(f"unknown activation {name!r}")

    def concat(self, parts: list[int]) -> int:
        values = [self.value(p) for p in parts]
        if any(v.ndim != 1 for v in values):
            raise ShapeError("concat only joins 1-D nodes")
        ctx = tuple(v.shape[0] for v in values)
        return self._push("concat", tuple(parts), np.concatenate(values), ctx=ctx)

    def sum_squares(self, a: int) -> int:
        v = self.value(a)
        return self._push("sum_squares", (a,), np.asarray(np.sum(v * v)))

    def finalize(self, output: int) -> int:
        if not 0 <= output < len(self.nodes):
            raise ValueError(f"node {output} not on tape")
        self.output = output
        return output


def backward(tape: Tape, seed_grad=None) -> dict[int, np.ndarray]:
    """Reverse-mode gradients of the finalized output w.r.t. leaf nodes.

    Returns a dict keyed by leaf node id.  `seed_grad` must match the
    output shape and defaults to 1 for scalar outputs.
    """
    if tape.output is None:
        raise UnfinalizedTapeError("finalize the tape before calling backward")
    out_node = tape.nodes[tape.output]
    if seed_grad is None:
        if out_node.value.ndim != 0:
            raise ShapeError("seed_grad is required for non-scalar outputs")
        seed_grad = np.asarray(1.0)
    seed_grad = np.asarray(seed_grad, dtype=np.float64)
    if seed_grad.shape != out_node.value.shape:
        raise ShapeError(
            f"seed_grad shape {seed_grad.shape} != output shape {out_node.value.shape}"
        )

    adjoint: dict[int, np.ndarray] = {tape.output: seed_grad}
    leaf_grads: dict[int, np.ndarray] = {}
    for i in range(tape.output, -1, -1):
        node = tape.nodes[i]
        if not node.requires_grad or i not in adjoint:
            continue
        g = adjoint[i]
        if node.op == "leaf":
            leaf_grads[i] = g
            continue
        for p, pg in zip(node.parents, _op_vjp(tape, node, g)):
            if pg is None or not tape.nodes[p].requires_grad:
                continue
            adjoint[p] = adjoint[p] + pg if p in adjoint else pg
    return leaf_grads


def _op_vjp(tape: Tape, node: _Node, g: np.ndarray):
    """Per-parent gradient contributions for one recorded op."""
    op = node.op
    vals = [tape.nodes[p].value for p in node.parents]
    if op == "affine":
        x, w = vals[0], vals[1]
        if x.ndim == 1:
            gx = w.T @ g
            gw = np.outer(g, x)
            gb = g
        else:
            gx = g @ w
            gw = g.T @ x
            gb = g.sum(axis=0)
        return (gx, gw, gb) if len(node.parents) == 3 else (gx, gw)
    if op == "add":
        return (g, g)
    if op == "sub":
        return (g, -g)
    if op == "mul":
        return (g * vals[1], g * vals[0])
    if op == "scale":
        return (g * node.ctx,)
    if op == "tanh":
        return (g * _activation_deriv_from_output("tanh", node.value),)
    if op == "smooth_relu":
        return (g * _activation_deriv_from_output("smooth_relu", node.value),)
    if op == "concat":
        out, offset = [], 0
        for size in node.ctx:
            out.append(g[offset:offset + size])
            offset += size
        return tuple(out)
    if op == "sum_squares":
        return (2.0 * vals[0] * g,)
    raise ValueError(f"no vjp for op {op!r}")


def mlp_forward(m: Mlp, x, record: bool = False):
    """Run the network on a 1-D sample or 2-D batch.

    Returns ``(y, activations, tape)``; `activations` holds every
    post-activation layer output in order and `tape` is None unless
    `record` is set.  When recording, the tape carries `input_node` and
    `param_nodes` attributes for gradient lookup.
    """
    x = np.asarray(x, dtype=np.float64)
    in_dim = x.shape[-1] if x.ndim in (1, 2) else None
    if in_dim != m.input_dim:
        raise ShapeError(f"input dim {in_dim} != network input dim {m.input_dim}")

    if not record:
        activations = []
        h = x
        for layer in m.layers:
            if h.ndim == 1:
                h = layer.weight @ h + layer.bias
            else:
                h = h @ layer.weight.T + layer.bias
            h = apply_activation(layer.activation, h)
            activations.append(h)
        return h, activations, None

    tape = Tape()
    node = tape.leaf(x)
    tape.input_node = node
    tape.param_nodes = {}
    activations = []
    for i, layer in enumerate(m.layers):
        w = tape.leaf(layer.weight)
        b = tape.leaf(layer.bias)
        tape.param_nodes[f"{i}.w"] = w
        tape.param_nodes[f"{i}.b"] = b
        node = tape.activation(layer.activation, tape.affine(node, w, b))
        activations.append(tape.value(node))
    tape.finalize(node)
    return tape.value(node), activations, tape


def tape_mlp(tape: Tape, m: Mlp, x_node: int) -> tuple[int, list[int]]:
    """Record the network on an existing tape with parameters as constants.

    Used when only the gradient w.r.t. the input is needed.  Returns the
    output node and the per-layer post-activation nodes.
    """
    node = x_node
    act_nodes = []
    for layer in m.layers:
        w = tape.constant(layer.weight)
        b = tape.constant(layer.bias)
        node = tape.activation(layer.activation, tape.affine(node, w, b))
        act_nodes.append(node)
    return node, act_nodes


# -- optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState | None, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction.  Functional: returns new dicts."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(
                f"non-finite gradient for parameter {key!r}",
                diagnostics={"param": key, "max_abs": float(np.max(np.abs(g[np.isfinite(g)]), initial=0.0))},
            )
    state = state or AdamState()
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * state.m.get(key, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(key, np.zeros_like(p)) + (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[key] = p - update
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(step=step, m=new_m, v=new_v)


# -- construction and persistence ----------------------------------------


def new_mlp(dims: list[int], activations: list[str] | str = "tanh",
            seed=0, final_activation: str = "identity") -> Mlp:
    """Seeded Gaussian init, weights scaled by 1/sqrt(fan_in), zero bias."""
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    n_layers = len(dims) - 1
    if isinstance(activations, str):
        acts = [activations] * (n_layers - 1) + [final_activation]
    else:
        acts = list(activations)
        if len(acts) != n_layers:
            raise ShapeError(f"{n_layers} layers need {n_layers} activations, got {len(acts)}")
    rng = ensure_rng(seed)
    layers = []
    for i in range(n_layers):
        w = rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i])
        b = np.zeros(dims[i + 1])
        layers.append(Layer(weight=w, bias=b, activation=acts[i]))
    return Mlp(layers=tuple(layers))


def save_checkpoint(path, m: Mlp) -> None:
    """Binary layout: b"PMGL", version u32, layer count u32, then per layer
    rows u32, cols u32, activation tag u8, weights f64 row-major, bias f64.
    All integers and floats little-endian."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(struct.pack("<I", len(m.layers)))
        for layer in m.layers:
            fh.write(struct.pack("<IIB", layer.out_dim, layer.in_dim, _ACT_TAGS[layer.activation]))
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise CheckpointError("bad magic bytes; not a PMGL checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_layers,) = struct.unpack_from("<I", data, 8)
    offset = 12
    layers = []
    for _ in range(n_layers):
        if offset + 9 > len(data):
            raise CheckpointError("truncated checkpoint: missing layer header")
        rows, cols, tag = struct.unpack_from("<IIB", data, offset)
        offset += 9
        if tag >= len(ACTIVATIONS):
            raise CheckpointError(f"unknown activation tag {tag}")
        n_w, n_b = rows * cols, rows
        need = (n_w + n_b) * 8
        if offset + need > len(data):
            raise CheckpointError("truncated checkpoint: missing layer data")
        w = np.frombuffer(data, dtype="<f8", count=n_w, offset=offset).reshape(rows, cols)
        offset += n_w * 8
        b = np.frombuffer(data, dtype="<f8", count=n_b, offset=offset)
        offset += n_b * 8
        layers.append(Layer(weight=w.copy(), bias=b.copy(), activation=ACTIVATIONS[tag]))
    if offset != len(data):
        raise CheckpointError("trailing bytes after last layer")
    return Mlp(layers=tuple(layers))
