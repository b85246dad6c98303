"""Expert-knowledge internalization: the confidence proxy.

A small relu MLP with a sigmoid head learns clean-vs-noisy geometry from the
arbitrated anchor set, reading a matching-evidence vector built from query
and target embeddings. Dropout stays on at inference; averaging T stochastic
passes approximates the Bayesian predictive and yields the confidence used
to gate downstream training.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ParseError, ShapeError
from .numkit import (MlpParams, RELU, SIGMOID, init_mlp, mlp_backward_batch,
                     mlp_forward_batch)
from .rng import RngState, STREAM_EKI

CKPT_SCHEMA = "airknow-ckpt-v1"

# variant -> ordered blocks; q/t are the embedded query/target, r/m/t_raw the
# raw triplet elements
GDV_VARIANTS = {
    "full": ("q", "t", "diff", "prod"),
    "triplet_raw": ("r", "m", "t_raw"),
    "basic_only": ("q", "t"),
    "no_hadamard": ("q", "t", "diff"),
    "no_diff": ("q", "t", "prod"),
    "no_basic": ("diff", "prod"),
}


def gdv_dim(variant: str, dim: int) -> int:
    if variant not in GDV_VARIANTS:
        raise InputError(f"unknown GDV variant {variant!r}")
    return len(GDV_VARIANTS[variant]) * dim


def compose_gdv_batch(z_q, z_t, variant="full", z_r=None, z_m=None) -> np.ndarray:
    """Stack matching-evidence blocks for a batch of pairs."""
    if variant not in GDV_VARIANTS:
        raise InputError(f"unknown GDV variant {variant!r}")
    needs_raw = "r" in GDV_VARIANTS[variant]
    if needs_raw and (z_r is None or z_m is None):
        raise InputError(f"variant {variant!r} needs z_r and z_m")
    q = np.atleast_2d(np.asarray(z_q, dtype=np.float64))
    t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    if q.shape != t.shape:
        raise ShapeError(f"z_q shape {q.shape} != z_t shape {t.shape}")
    blocks = {"q": q, "t": t}
    if needs_raw:
        r = np.atleast_2d(np.asarray(z_r, dtype=np.float64))
        m = np.atleast_2d(np.asarray(z_m, dtype=np.float64))
        if r.shape != q.shape or m.shape != q.shape:
            raise ShapeError("raw triplet blocks must match the pair dimension")
        blocks["r"], blocks["m"], blocks["t_raw"] = r, m, t
    parts = []
    for name in GDV_VARIANTS[variant]:
        if name == "diff":
            parts.append(q - t)
        elif name == "prod":
            parts.append(q * t)
        else:
            parts.append(blocks[name])
    return np.hstack(parts)


def compose_gdv(z_q, z_t, variant="full", z_r=None, z_m=None) -> np.ndarray:
    """Single-pair matching-evidence vector."""
    out = compose_gdv_batch(z_q, z_t, variant, z_r, z_m)
    return out[0]


@dataclass
class EkiHyper:
    """Proxy training and inference settings."""

    dropout: float = 0.1
    l2: float = 1e-4
    class_weight: object = "balanced"   # "balanced" or a positive float
    learning_rate: float = 5e-4
    epochs: int = 2
    batch_size: int = 256
    mc_passes: int = 16
    threshold: float = 0.5
    gdv_variant: str = "full"
    hidden: tuple = (512, 256)
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.l2 < 0:
            raise ConfigError(f"l2 {self.l2} < 0")
        if self.mc_passes < 1:
            raise ConfigError(f"mc_passes {self.mc_passes} < 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.gdv_variant not in GDV_VARIANTS:
            raise ConfigError(f"unknown GDV variant {self.gdv_variant!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not isinstance(self.class_weight, str):
            if float(self.class_weight) <= 0:
                raise ConfigError("class_weight must be positive")
        elif self.class_weight != "balanced":
            raise ConfigError(f"unknown class_weight policy {self.class_weight!r}")


@dataclass
class Confidence:
    """MC-averaged clean probability for one input."""

    value: float
    passes: int
    per_pass: object = None     # optional (T,) diagnostics


def build_proxy(input_dim: int, hyper: EkiHyper, rng: RngState) -> MlpParams:
    """He-initialized proxy with a zeroed sigmoid head.

    Dropout applies after each hidden activation (never to the raw input or
    the final output), matching the configured rate.
    """
    dims = [input_dim, *hyper.hidden, 1]
    activations = [RELU] * len(hyper.hidden) + [SIGMOID]
    dropout = [0.0] + [hyper.dropout] * len(hyper.hidden)
    return init_mlp(dims, activations, dropout, rng=rng, zero_final=True)


def eki_loss(params, X, y, omega=1.0, lambda_l2=0.0, dropout_enabled=False,
             rng=None):
    """Class-weighted BCE over one stochastic pass, plus an L2 weight penalty.

    Returns (loss, grads) where grads are exact for the sampled dropout path.
    Predictions are clamped to [1e-7, 1 - 1e-7]; clamped samples contribute
    zero gradient.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise InputError("empty batch")
    if y.shape[0] != X.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {X.shape[0]} samples")
    if not np.isin(y, (0.0, 1.0)).all():
        raise InputError("labels must be 0 or 1")
    if omega <= 0:
        raise InputError(f"omega {omega} must be positive")

    out, cache = mlp_forward_batch(params, X, dropout_enabled=dropout_enabled,
                                   rng=rng)
    raw = out[:, 0]
    clamped = np.clip(raw, 1e-7, 1.0 - 1e-7)
    n = X.shape[0]
    per_sample = -(omega * y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped))
    loss = float(per_sample.mean())

    inside = (raw > 1e-7) & (raw < 1.0 - 1e-7)
    dyhat = -(omega * y / clamped - (1.0 - y) / (1.0 - clamped)) / n
    dyhat = np.where(inside, dyhat, 0.0)
    grads, _ = mlp_backward_batch(params, cache, dyhat[:, None])

    if lambda_l2 > 0.0:
        for k, w in enumerate(params.weights):
            loss += lambda_l2 * float((w * w).sum())
            grads.weights[k] = grads.weights[k] + 2.0 * lambda_l2 * w
    return loss, grads


class _Adam:
    """Deterministic Adam over an MlpParams pytree."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.mw = [np.zeros_like(w) for w in params.weights]
        self.vw = [np.zeros_like(w) for w in params.weights]
        self.mb = [np.zeros_like(b) for b in params.biases]
        self.vb = [np.zeros_like(b) for b in params.biases]

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in range(params.n_layers):
            for store_m, store_v, value, grad in (
                (self.mw, self.vw, params.weights[k], grads.weights[k]),
                (self.mb, self.vb, params.biases[k], grads.biases[k]),
            ):
                store_m[k] = self.b1 * store_m[k] + (1.0 - self.b1) * grad
                store_v[k] = self.b2 * store_v[k] + (1.0 - self.b2) * grad * grad
                value -= self.lr * (store_m[k] / c1) / (np.sqrt(store_v[k] / c2)
                                                        + self.eps)


def resolve_class_weight(y, policy) -> float:
    """Noisy/clean count ratio clamped to [0.1, 10]; numeric policies pass through."""
    if not isinstance(policy, str):
        return float(policy)
    n_clean = int((y == 1).sum())
    n_noisy = int((y == 0).sum())
    if n_clean == 0 or n_noisy == 0:
        warnings.warn("anchor set has a single class; falling back to omega=1")
        return 1.0
    return float(np.clip(n_noisy / n_clean, 0.1, 10.0))


def fit_confidence_mlp(X, y, hyper: EkiHyper, seed: int):
    """Train the proxy on (features, labels); returns (params, epoch losses).

    Features are standardized on the training set and the scaling is folded
    back into the first layer of the returned parameters, so callers feed raw
    feature vectors at inference time.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise ConfigError("empty training set")
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {X.shape[0]} samples")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    Xs = (X - mu) / sd

    root = RngState(seed, STREAM_EKI)
    params = build_proxy(X.shape[1], hyper, root.derive(1))
    omega = resolve_class_weight(y, hyper.class_weight)
    adam = _Adam(params, hyper.learning_rate) if hyper.optimizer == "adam" else None

    n = X.shape[0]
    epoch_losses = []
    for epoch in range(hyper.epochs):
        order = root.derive(2, epoch).generator().permutation(n)
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, n, hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            loss, grads = eki_loss(
                params, Xs[idx], y[idx], omega=omega, lambda_l2=hyper.l2,
                dropout_enabled=hyper.dropout > 0.0,
                rng=root.derive(3, epoch, step),
            )
            if adam is not None:
                adam.step(params, grads)
            else:
                for k in range(params.n_layers):
                    params.weights[k] -= hyper.learning_rate * grads.weights[k]
                    params.biases[k] -= hyper.learning_rate * grads.biases[k]
            total += loss * len(idx)
            seen += len(idx)
        epoch_losses.append(total / seen)

    # fold the standardization into layer 1: W (x - mu) / sd + b
    folded = params.copy()
    folded.weights[0] = params.weights[0] / sd
    folded.biases[0] = params.biases[0] - folded.weights[0] @ mu
    return folded, epoch_losses


def train_eki(anchor, dataset, hyper: EkiHyper, seed: int, embed_fn=None):
    """Stage-1 training from arbitrated anchor records.

    ``embed_fn(Zr, Zm, Zt) -> (Zq, Zt_emb)`` supplies the frozen embedding
    heads; it is unused by the raw-triplet variant. Returns
    (params, per-epoch mean losses).
    """
    if not anchor:
        raise ConfigError("empty anchor set")
    by_id = dataset.by_id()
    missing = [rec.id for rec in anchor if rec.id not in by_id]
    if missing:
        raise ConfigError(f"anchor ids not in dataset: {missing[:3]}...")
    triplets = [by_id[rec.id] for rec in anchor]
    Zr = np.stack([t.z_r for t in triplets])
    Zm = np.stack([t.z_m for t in triplets])
    Zt = np.stack([t.z_t for t in triplets])
    y = np.array([1.0 if rec.verdict.is_clean else 0.0 for rec in anchor])

    if hyper.gdv_variant == "triplet_raw":
        X = compose_gdv_batch(Zr, Zt, "triplet_raw", z_r=Zr, z_m=Zm)
    else:
        if embed_fn is None:
            raise InputError(f"variant {hyper.gdv_variant!r} needs embedding heads")
        Zq, Zt_emb = embed_fn(Zr, Zm, Zt)
        X = compose_gdv_batch(Zq, Zt_emb, hyper.gdv_variant)
    return fit_confidence_mlp(X, y, hyper, seed)


def _inference_params(params: MlpParams, p):
    """Dropout schedule for MC passes: rate p on the slots the net was built with."""
    if p is None:
        return params, any(r > 0 for r in params.dropout)
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise InputError(f"dropout rate {p} outside [0, 1)")
    if p == 0.0:
        return params, False
    adjusted = MlpParams(params.weights, params.biases, list(params.activations),
                         [p if r > 0 else 0.0 for r in params.dropout])
    return adjusted, any(r > 0 for r in adjusted.dropout)


def infer_confidence_batch(params, X, T=16, p=None, rng=None) -> np.ndarray:
    """Mean sigmoid output over T stochastic passes, one value per row."""
    if T < 1:
        raise InputError(f"T {T} < 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    run_params, stochastic = _inference_params(params, p)
    if not stochastic:
        out, _ = mlp_forward_batch(run_params, X)
        return out[:, 0].copy()
    if rng is None:
        raise InputError("stochastic inference needs an rng")
    acc = np.zeros(X.shape[0])
    for t in range(T):
        out, _ = mlp_forward_batch(run_params, X, dropout_enabled=True,
                                   rng=rng.derive(4, t))
        acc += out[:, 0]
    return acc / T


def infer_confidence(params, gdv, T=16, p=None, rng=None) -> Confidence:
    """Single-input confidence with optional per-pass diagnostics."""
    if T < 1:
        raise InputError(f"T {T} < 1")
    gdv = np.asarray(gdv, dtype=np.float64).ravel()
    run_params, stochastic = _inference_params(params, p)
    if not stochastic:
        out, _ = mlp_forward_batch(run_params, gdv.reshape(1, -1))
        value = float(out[0, 0])
        return Confidence(value, T, np.full(T, value))
    if rng is None:
        raise InputError("stochastic inference needs an rng")
    per_pass = np.empty(T)
    for t in range(T):
        out, _ = mlp_forward_batch(run_params, gdv.reshape(1, -1),
                                   dropout_enabled=True, rng=rng.derive(4, t))
        per_pass[t] = out[0, 0]
    return Confidence(float(per_pass.mean()), T, per_pass)


# ---------------------------------------------------------------------------
# Evidence decomposition check on an exactly summable toy space
# ---------------------------------------------------------------------------

def elbo_identity_check(prior, likelihood, q) -> float:
    """|log evidence - (KL(q || posterior) + ELBO)| on a finite weight space.

    All three arrays range over the same discrete weight states; prior and q
    must be strictly positive and sum to one within 1e-9.
    """
    prior = np.asarray(prior, dtype=np.float64)
    likelihood = np.asarray(likelihood, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not (prior.shape == likelihood.shape == q.shape) or prior.ndim != 1:
        raise ShapeError("prior, likelihood and q must be equal-length vectors")
    if prior.size > 16:
        raise InputError(f"toy space has {prior.size} states, limit is 16")
    if (prior <= 0).any() or (q <= 0).any() or (likelihood <= 0).any():
        raise InputError("all mass and likelihood values must be strictly positive")
    for name, mass in (("prior", prior), ("q", q)):
        if abs(mass.sum() - 1.0) > 1e-9:
            raise InputError(f"{name} sums to {mass.sum()}, not 1")

    evidence = float(likelihood @ prior)
    log_evidence = np.log(evidence)
    posterior = likelihood * prior / evidence
    kl_q_post = float((q * (np.log(q) - np.log(posterior))).sum())
    elbo = float((q * np.log(likelihood)).sum()
                 - (q * (np.log(q) - np.log(prior))).sum())
    return abs(log_evidence - (kl_q_post + elbo))


# ---------------------------------------------------------------------------
# Checkpoint serialization (decimal, 17 significant digits, exact round-trip)
# ---------------------------------------------------------------------------

def _f17(x: float) -> str:
    return format(float(x), ".17g")

def _vec17(v) -> str:
    return "[" + ",".join(_f17(x) for x in np.asarray(v).ravel()) + "]"

def _mat17(w) -> str:
    return "[" + ",".join(_vec17(row) for row in np.asarray(w)) + "]"


def _json17(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ",".join(
            json.dumps(str(k)) + ":" + _json17(v) for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_json17(v) for v in obj) + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _f17(obj)
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def save_checkpoint(params: MlpParams, path, hyper=None):
    """Single JSON document holding architecture, layers and hyper settings."""
    hyper_doc = dict(hyper or {})
    hyper_doc.setdefault("activations", list(params.activations))
    hyper_doc.setdefault("dropout", [float(r) for r in params.dropout])
    body = (
        '{"schema":' + json.dumps(CKPT_SCHEMA)
        + ',"arch":' + _json17(params.dims())
        + ',"layers":['
        + ",".join('{"w":' + _mat17(w) + ',"b":' + _vec17(b) + "}"
                   for w, b in zip(params.weights, params.biases))
        + '],"hyper":' + _json17(hyper_doc) + "}"
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(body + "\n")


def load_checkpoint(path):
    """Returns (MlpParams, hyper dict)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("schema") != CKPT_SCHEMA:
        raise ParseError(f"{path}: expected schema {CKPT_SCHEMA!r}")
    hyper = doc.get("hyper", {})
    layers = doc.get("layers", [])
    if not layers:
        raise ParseError(f"{path}: checkpoint has no layers")
    weights = [np.asarray(layer["w"], dtype=np.float64) for layer in layers]
    biases = [np.asarray(layer["b"], dtype=np.float64) for layer in layers]
    activations = hyper.get("activations") or \
        [RELU] * (len(layers) - 1) + [SIGMOID]
    dropout = hyper.get("dropout") or [0.0] * len(layers)
    params = MlpParams(weights, biases, list(activations),
                       [float(r) for r in dropout])
    arch = doc.get("arch")
    if arch is not None and list(arch) != params.dims():
        raise ParseError(f"{path}: arch {arch} does not match layer shapes")
    return params, hyper
