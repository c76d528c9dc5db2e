"""Minimal dense-network numeric engine.

Fixed-topology MLPs (rectifier hidden layers, linear output) evaluated and
differentiated by hand in float64, plus the scalar primitives every trainer
uses (Huber, log-sum-exp, softmax cross-entropy) and bias-corrected Adam.
All functions are pure: parameters and optimizer states are values, updates
return fresh objects.

Conventions: a weight matrix has shape (out, in); a batch is (B, in_dim);
``backprop`` returns the gradient of ``sum(upstream * output)`` so callers
fold any 1/B loss scaling into ``upstream`` themselves.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation, DataFormatError, NumericError

DEFAULT_HIDDEN_DIMS = (256, 256)

CHECKPOINT_MAGIC = b"OMRL-NET1"


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of one MLP; weights[i] has shape (fan_out, fan_in)."""

    layer_weights: tuple[np.ndarray, ...]
    layer_biases: tuple[np.ndarray, ...]
    in_dim: int
    out_dim: int
    hidden_dims: tuple[int, ...]

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights)

    def validate(self) -> None:
        dims = (self.in_dim, *self.hidden_dims, self.out_dim)
        if len(self.layer_weights) != len(dims) - 1 or len(self.layer_biases) != len(dims) - 1:
            raise ContractViolation("layer count does not match dims chain")
        for i, (w, b) in enumerate(zip(self.layer_weights, self.layer_biases)):
            if w.shape != (dims[i + 1], dims[i]):
                raise ContractViolation(
                    f"layer {i} weight shape {w.shape}, expected {(dims[i + 1], dims[i])}"
                )
            if b.shape != (dims[i + 1],):
                raise ContractViolation(f"layer {i} bias shape {b.shape}, expected {(dims[i + 1],)}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"non-finite parameter in layer {i}")

    def copy(self) -> "MlpParams":
        return replace(
            self,
            layer_weights=tuple(w.copy() for w in self.layer_weights),
            layer_biases=tuple(b.copy() for b in self.layer_biases),
        )


@dataclass(frozen=True)
class GradBundle:
    """Per-parameter gradients, shape-congruent with an MlpParams."""

    layer_weights: tuple[np.ndarray, ...]
    layer_biases: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class AdamState:
    first_moment: GradBundle
    second_moment: GradBundle
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def init_params(
    in_dim: int,
    out_dim: int,
    hidden_dims: tuple[int, ...] = DEFAULT_HIDDEN_DIMS,
    rng: np.random.Generator | None = None,
) -> MlpParams:
    """He-style uniform fan-in init (limit sqrt(6/fan_in)), zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    dims = (in_dim, *hidden_dims, out_dim)
    if any(d < 1 for d in dims):
        raise ContractViolation(f"all layer dims must be positive, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases), in_dim, out_dim, tuple(hidden_dims))


def zeros_like_grads(params: MlpParams) -> GradBundle:
    return GradBundle(
        tuple(np.zeros_like(w) for w in params.layer_weights),
        tuple(np.zeros_like(b) for b in params.layer_biases),
    )


def _check_batch(params: MlpParams, obs_batch: np.ndarray) -> np.ndarray:
    x = np.asarray(obs_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ContractViolation(f"obs batch shape {x.shape} incompatible with in_dim {params.in_dim}")
    if not np.isfinite(x).all():
        raise ContractViolation("obs batch contains non-finite entries")
    return x


def _forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass keeping pre-activations and activations for backprop."""
    pre, act = [], [x]
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.layer_weights, params.layer_biases)):
        z = h @ w.T + b
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite pre-activation in layer {i}")
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        act.append(h)
    return h, pre, act


def forward(params: MlpParams, obs_batch: np.ndarray) -> np.ndarray:
    """Evaluate the network on a (B, in_dim) batch; returns (B, out_dim)."""
    x = _check_batch(params, obs_batch)
    out, _, _ = _forward_cached(params, x)
    return out


def backprop(params: MlpParams, obs_batch: np.ndarray, upstream_grad: np.ndarray) -> GradBundle:
    """Gradient of sum(upstream_grad * forward(params, obs)) w.r.t. params."""
    x = _check_batch(params, obs_batch)
    up = np.asarray(upstream_grad, dtype=np.float64)
    if up.shape != (x.shape[0], params.out_dim):
        raise ContractViolation(
            f"upstream grad shape {up.shape}, expected {(x.shape[0], params.out_dim)}"
        )
    _, pre, act = _forward_cached(params, x)
    grads_w = [None] * params.n_layers
    grads_b = [None] * params.n_layers
    delta = up
    for i in range(params.n_layers - 1, -1, -1):
        grads_w[i] = delta.T @ act[i]
        grads_b[i] = delta.sum(axis=0)
        if not (np.isfinite(grads_w[i]).all() and np.isfinite(grads_b[i]).all()):
            raise NumericError(f"non-finite gradient in layer {i}")
        if i > 0:
            delta = (delta @ params.layer_weights[i]) * (pre[i - 1] > 0.0)
    return GradBundle(tuple(grads_w), tuple(grads_b))


def adam_init(
    params: MlpParams,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    if not (lr > 0 and 0 < beta1 < 1 and 0 < beta2 < 1 and eps > 0):
        raise ContractViolation("invalid Adam hyperparameters")
    return AdamState(zeros_like_grads(params), zeros_like_grads(params), 0, lr, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: GradBundle, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns fresh (params, state)."""
    t = state.step_count + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_w, new_b, m_w, m_b, v_w, v_b = [], [], [], [], [], []
    for kind, cur, gs, ms, vs, outs in (
        ("weight", params.layer_weights, grads.layer_weights, state.first_moment.layer_weights,
         state.second_moment.layer_weights, (new_w, m_w, v_w)),
        ("bias", params.layer_biases, grads.layer_biases, state.first_moment.layer_biases,
         state.second_moment.layer_biases, (new_b, m_b, v_b)),
    ):
        for i, (p, g, m, v) in enumerate(zip(cur, gs, ms, vs)):
            if g.shape != p.shape:
                raise ContractViolation(f"{kind} grad shape {g.shape} != param shape {p.shape} (layer {i})")
            m_new = state.beta1 * m + (1.0 - state.beta1) * g
            v_new = state.beta2 * v + (1.0 - state.beta2) * g * g
            step = state.lr * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
            outs[0].append(p - step)
            outs[1].append(m_new)
            outs[2].append(v_new)
    new_params = replace(params, layer_weights=tuple(new_w), layer_biases=tuple(new_b))
    new_state = replace(
        state,
        first_moment=GradBundle(tuple(m_w), tuple(m_b)),
        second_moment=GradBundle(tuple(v_w), tuple(v_b)),
        step_count=t,
    )
    return new_params, new_state


def logsumexp(q_row: np.ndarray) -> float:
    """Max-shifted log(sum(exp(q_row))); stable for arbitrarily large entries."""
    q = np.asarray(q_row, dtype=np.float64).ravel()
    if q.size == 0:
        raise ContractViolation("logsumexp of empty row")
    m = q.max()
    return float(m + np.log(np.exp(q - m).sum()))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def huber(residual: float, delta: float = 1.0) -> float:
    """0.5 r^2 inside |r| <= delta, linear with slope delta outside."""
    if delta <= 0:
        raise ContractViolation("huber delta must be positive")
    r = abs(float(residual))
    if r <= delta:
        return 0.5 * r * r
    return delta * (r - 0.5 * delta)


def huber_grad(residual, delta: float = 1.0):
    """d huber / d residual; clips the residual to [-delta, delta]."""
    return np.clip(residual, -delta, delta)


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against a hard label, with its gradient."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if not 0 <= int(label) < z.size:
        raise ContractViolation(f"label {label} out of range for {z.size} logits")
    loss = logsumexp(z) - float(z[int(label)])
    grad = softmax(z)
    grad[int(label)] -= 1.0
    return loss, grad


def save_params(path, params_list) -> None:
    """Write one or more networks to a versioned binary checkpoint.

    Layout: magic "OMRL-NET1", u32 network count, then per network a shape
    header (u32 in_dim, out_dim, layer count, then u32 rows/cols per layer)
    followed by float64 little-endian weights and bias per layer, in order.
    """
    if isinstance(params_list, MlpParams):
        params_list = [params_list]
    blobs = [CHECKPOINT_MAGIC, struct.pack("<I", len(params_list))]
    for params in params_list:
        params.validate()
        blobs.append(struct.pack("<III", params.in_dim, params.out_dim, params.n_layers))
        for w in params.layer_weights:
            blobs.append(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in zip(params.layer_weights, params.layer_biases):
            blobs.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            blobs.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def load_params(path) -> list[MlpParams]:
    """Read a checkpoint written by save_params, validating the shape chain."""
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise DataFormatError(f"truncated checkpoint while reading {what}", offset=off)
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic", offset=0)
    (count,) = struct.unpack("<I", take(4, "network count"))
    nets = []
    for n in range(count):
        in_dim, out_dim, n_layers = struct.unpack("<III", take(12, f"net {n} header"))
        shapes = [struct.unpack("<II", take(8, f"net {n} layer shape")) for _ in range(n_layers)]
        prev = in_dim
        for i, (rows, cols) in enumerate(shapes):
            if cols != prev:
                raise DataFormatError(f"net {n} layer {i} fan-in {cols} breaks shape chain ({prev})")
            prev = rows
        if prev != out_dim:
            raise DataFormatError(f"net {n} final fan-out {prev} != out_dim {out_dim}")
        weights, biases = [], []
        for i, (rows, cols) in enumerate(shapes):
            w = np.frombuffer(take(8 * rows * cols, f"net {n} layer {i} weights"), dtype="<f8")
            b = np.frombuffer(take(8 * rows, f"net {n} layer {i} bias"), dtype="<f8")
            weights.append(w.reshape(rows, cols).astype(np.float64))
            biases.append(b.astype(np.float64))
        hidden = tuple(rows for rows, _ in shapes[:-1])
        params = MlpParams(tuple(weights), tuple(biases), in_dim, out_dim, hidden)
        params.validate()
        nets.append(params)
    if off != len(buf):
        raise DataFormatError("trailing bytes after last network", offset=off)
    return nets
