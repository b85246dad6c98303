"""Dense numerical kernels: small MLPs with exact hand-derived backprop.

Weights are (out, in) matrices acting on column semantics (y = W x + b); all
math runs in float64. Dropout is inverted (kept units divided by 1 - p) and
applies to each layer's *input*, so a rate of zero reproduces the
dropout-disabled path bit for bit and layer outputs are never masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InputError, ShapeError
from .rng import RngState

RELU = "relu"
SIGMOID = "sigmoid"
IDENTITY = "identity"
_ACTIVATIONS = (RELU, SIGMOID, IDENTITY)


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, kind):
    if kind == RELU:
        return np.maximum(z, 0.0)
    if kind == SIGMOID:
        return sigmoid(z)
    if kind == IDENTITY:
        return z
    raise InputError(f"unknown activation {kind!r}")


def _activation_grad(z, a, kind):
    """d activation / d preactivation, from cached pre/post activations."""
    if kind == RELU:
        return (z > 0.0).astype(np.float64)
    if kind == SIGMOID:
        return a * (1.0 - a)
    if kind == IDENTITY:
        return np.ones_like(z)
    raise InputError(f"unknown activation {kind!r}")


@dataclass
class MlpParams:
    """Weights, biases, activation schedule and per-layer input dropout rates.

    ``dropout[k]`` is the rate applied to the input of layer ``k``; the final
    output is never masked.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    dropout: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def dims(self) -> list:
        """Layer widths [input, hidden..., output]."""
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def validate(self):
        n = len(self.weights)
        if n == 0:
            raise InputError("MlpParams needs at least one layer")
        if not (len(self.biases) == len(self.activations) == len(self.dropout) == n):
            raise ShapeError("weights, biases, activations and dropout must align")
        for k in range(n):
            w, b = np.asarray(self.weights[k]), np.asarray(self.biases[k])
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k > 0 and w.shape[1] != np.asarray(self.weights[k - 1]).shape[0]:
                raise ShapeError(
                    f"layer {k} input dim {w.shape[1]} != layer {k-1} output dim"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise DomainError(f"layer {k}: non-finite parameter")
            if self.activations[k] not in _ACTIVATIONS:
                raise InputError(f"layer {k}: unknown activation {self.activations[k]!r}")
            rate = float(self.dropout[k])
            if not 0.0 <= rate < 1.0:
                raise InputError(f"layer {k}: dropout rate {rate} outside [0, 1)")

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            list(self.dropout),
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
            list(self.dropout),
        )


def init_mlp(dims, activations, dropout=None, rng=None, zero_final=False) -> MlpParams:
    """He-initialized MLP for the given layer widths.

    ``zero_final`` zeroes the last layer so initial outputs carry no
    label-independent spread; useful for short training schedules.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise InputError("need at least input and output dims")
    if dropout is None:
        dropout = [0.0] * (len(dims) - 1)
    if rng is None:
        rng = RngState(0)
    g = rng.generator()
    weights, biases = [], []
    for k in range(len(dims) - 1):
        fan_in = dims[k]
        w = g.standard_normal((dims[k + 1], fan_in)) * np.sqrt(2.0 / fan_in)
        if zero_final and k == len(dims) - 2:
            w = np.zeros_like(w)
        weights.append(w)
        biases.append(np.zeros(dims[k + 1]))
    return MlpParams(weights, biases, list(activations), list(dropout))


@dataclass
class MlpCache:
    """Everything the backward pass needs for the exact cached path."""

    x: np.ndarray                 # raw input, (B, d)
    inputs: list                  # per layer: post-dropout input
    preacts: list                 # per layer: W x + b
    postacts: list                # per layer: activation output
    masks: list                   # per layer: scaled dropout mask or None
    single: bool = False          # True when built from a 1-D input


def _draw_masks(params: MlpParams, batch: int, rng: RngState):
    masks = []
    g = None
    for k in range(params.n_layers):
        rate = float(params.dropout[k])
        if rate == 0.0:
            masks.append(None)
            continue
        if g is None:
            if rng is None:
                raise InputError("dropout enabled but no rng given")
            g = rng.generator()
        keep = g.random((batch, params.weights[k].shape[1])) >= rate
        masks.append(keep.astype(np.float64) / (1.0 - rate))
    return masks


def mlp_forward_batch(params, X, dropout_enabled=False, rng=None, masks=None):
    """Forward a (B, d) batch; returns (outputs (B, out), cache).

    ``masks`` overrides the drawn dropout masks with explicit 0/1 keep masks
    (scaled internally); used by enumeration tests.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected 2-d batch, got shape {X.shape}")
    if X.shape[1] != params.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != first layer dim {params.input_dim}")
    if not np.isfinite(X).all():
        raise DomainError("non-finite input")

    if masks is not None:
        scaled = []
        for k, m in enumerate(masks):
            if m is None:
                scaled.append(None)
            else:
                rate = float(params.dropout[k])
                scaled.append(np.asarray(m, dtype=np.float64) / (1.0 - rate))
    elif dropout_enabled:
        scaled = _draw_masks(params, X.shape[0], rng)
    else:
        scaled = [None] * params.n_layers

    a = X
    inputs, preacts, postacts = [], [], []
    for k in range(params.n_layers):
        xk = a if scaled[k] is None else a * scaled[k]
        zk = xk @ params.weights[k].T + params.biases[k]
        a = _activate(zk, params.activations[k])
        inputs.append(xk)
        preacts.append(zk)
        postacts.append(a)
    return a, MlpCache(X, inputs, preacts, postacts, scaled)


def mlp_forward(params, x, dropout_enabled=False, rng=None, masks=None):
    """Forward a single vector; returns (output vector, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected 1-d input, got shape {x.shape}")
    if masks is not None:
        masks = [None if m is None else np.asarray(m, dtype=np.float64).reshape(1, -1)
                 for m in masks]
    out, cache = mlp_forward_batch(
        params, x.reshape(1, -1), dropout_enabled=dropout_enabled, rng=rng, masks=masks
    )
    cache.single = True
    return out[0], cache


def mlp_backward_batch(params, cache, upstream):
    """Exact gradients for the cached stochastic path.

    ``upstream`` is dLoss/dOutput, (B, out). Returns (param grads shaped like
    ``params``, dLoss/dInput (B, d)).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    B = cache.x.shape[0]
    if upstream.shape != (B, params.output_dim):
        raise ShapeError(
            f"upstream shape {upstream.shape} != {(B, params.output_dim)}"
        )
    grads = params.zeros_like()
    da = upstream
    for k in range(params.n_layers - 1, -1, -1):
        dz = da * _activation_grad(cache.preacts[k], cache.postacts[k],
                                   params.activations[k])
        grads.weights[k] = dz.T @ cache.inputs[k]
        grads.biases[k] = dz.sum(axis=0)
        dx = dz @ params.weights[k]
        if cache.masks[k] is not None:
            dx = dx * cache.masks[k]
        da = dx
    return grads, da


def mlp_backward(params, cache, upstream):
    """Single-vector variant of :func:`mlp_backward_batch`."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim != 1:
        raise ShapeError(f"expected 1-d upstream grad, got shape {upstream.shape}")
    if not cache.single:
        raise ShapeError("cache was built from a batch forward")
    grads, dx = mlp_backward_batch(params, cache, upstream.reshape(1, -1))
    return grads, dx[0]


def flatten_params(params: MlpParams) -> np.ndarray:
    """All weights then biases, layer by layer, as one float64 vector."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def unflatten_params(template: MlpParams, vec) -> MlpParams:
    """Inverse of :func:`flatten_params` against a shape template."""
    vec = np.asarray(vec, dtype=np.float64)
    out = template.zeros_like()
    pos = 0
    for k in range(template.n_layers):
        w = template.weights[k]
        out.weights[k] = vec[pos:pos + w.size].reshape(w.shape).copy()
        pos += w.size
        b = template.biases[k]
        out.biases[k] = vec[pos:pos + b.size].copy()
        pos += b.size
    if pos != vec.size:
        raise ShapeError(f"vector length {vec.size} != parameter count {pos}")
    return out


def cosine_sim(a, b) -> float:
    """Cosine similarity of two nonzero vectors of equal dimension."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DomainError("non-finite input")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("zero-norm vector")
    return float(a @ b / (na * nb))


def grad_check(fn, x0, epsilon=1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` maps a flat parameter vector to ``(loss, grad)`` and must be
    deterministic. The error denominator per coordinate is
    max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < epsilon <= 1e-2:
        raise InputError(f"epsilon {epsilon} outside (0, 1e-2]")
    x0 = np.asarray(x0, dtype=np.float64)
    loss0, grad = fn(x0)
    if not np.isfinite(loss0):
        raise DomainError("non-finite loss")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x0.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {x0.shape}")
    worst = 0.0
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += epsilon
        lp, _ = fn(xp)
        xm = x0.copy()
        xm[i] -= epsilon
        lm, _ = fn(xm)
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise DomainError("non-finite loss during finite differences")
        numeric = (lp - lm) / (2.0 * epsilon)
        denom = max(abs(grad[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst
