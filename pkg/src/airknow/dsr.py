"""Dual-stream reconciliation: gated contrastive training of embedding heads.

The compose head maps (reference, modification) pairs to unit query
embeddings; the project head maps targets into the same space. Per batch the
frozen confidence proxy scores each pair, the clean-alignment stream applies
a confidence-weighted negatives-suppression loss, and the reconciliation
stream applies a hinge that pushes suspect high-similarity pairs below a
tolerance margin. Confidence is recomputed from current embeddings every
batch and is a constant to the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, InputError, ShapeError
from .numkit import (IDENTITY, MlpParams, RELU, init_mlp, mlp_backward_batch,
                     mlp_forward_batch)
from .rng import RngState, STREAM_DSR
from . import eki as _eki

_EPS = 1e-7
HEAD_INIT_MODES = ("pretrained", "random")


@dataclass
class HeadParams:
    """Backbone substitute: compose (2D -> D) and project (D -> D) heads."""

    compose: MlpParams
    project: MlpParams

    def copy(self) -> "HeadParams":
        return HeadParams(self.compose.copy(), self.project.copy())


def init_heads(dim: int, mode: str = "random", modality_map=None,
               rng: RngState | None = None) -> HeadParams:
    """Fresh heads in the given mode.

    ``pretrained`` plays the role of a meaningfully pretrained backbone: the
    compose head starts as the exact additive composition through the world's
    modality map, realized with paired +/- rectifier units so the function is
    linear at initialization but genuinely nonlinear once trained; the
    project head starts as the identity. ``random`` is a seeded He start.
    """
    if mode not in HEAD_INIT_MODES:
        raise ConfigError(f"unknown head init mode {mode!r}")
    if mode == "pretrained":
        if modality_map is None:
            raise ConfigError("pretrained head init needs the modality map")
        m = np.asarray(modality_map, dtype=np.float64)
        if m.shape != (dim, dim):
            raise ShapeError(f"modality map shape {m.shape} != ({dim}, {dim})")
        half = np.hstack([np.eye(dim), m.T])
        compose = MlpParams(
            [np.vstack([half, -half]), np.hstack([np.eye(dim), -np.eye(dim)])],
            [np.zeros(2 * dim), np.zeros(dim)],
            [RELU, IDENTITY],
            [0.0, 0.0],
        )
        project = MlpParams([np.eye(dim)], [np.zeros(dim)], [IDENTITY], [0.0])
        return HeadParams(compose, project)
    if rng is None:
        rng = RngState(0, STREAM_DSR)
    compose = init_mlp([2 * dim, dim, dim], [RELU, IDENTITY],
                       rng=rng.derive(11))
    # small positive biases keep narrow relu layers alive at the start, so
    # the output normalization guard cannot trip on a fresh head
    compose.biases[0][:] = 0.01
    compose.biases[1][:] = 0.01
    project = init_mlp([dim, dim], [IDENTITY], rng=rng.derive(12))
    return HeadParams(compose, project)


def _normalize_forward(V):
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DomainError("normalization guard: zero pre-normalization output")
    return V / norms, norms


def _normalize_backward(V, norms, dU):
    U = V / norms
    return (dU - U * (dU * U).sum(axis=1, keepdims=True)) / norms


def compose_query_batch(heads: HeadParams, Zr, Zm):
    """Unit query embeddings for stacked (reference, modification) rows."""
    Zr = np.atleast_2d(np.asarray(Zr, dtype=np.float64))
    Zm = np.atleast_2d(np.asarray(Zm, dtype=np.float64))
    if Zr.shape != Zm.shape:
        raise ShapeError(f"z_r shape {Zr.shape} != z_m shape {Zm.shape}")
    X = np.hstack([Zr, Zm])
    V, cache = mlp_forward_batch(heads.compose, X)
    Q, norms = _normalize_forward(V)
    return Q, (cache, V, norms)


def compose_query(heads: HeadParams, z_r, z_m) -> np.ndarray:
    """Single-pair query embedding."""
    Q, _ = compose_query_batch(heads, z_r, z_m)
    return Q[0]


def project_targets_batch(heads: HeadParams, Zt):
    """Unit target embeddings."""
    Zt = np.atleast_2d(np.asarray(Zt, dtype=np.float64))
    V, cache = mlp_forward_batch(heads.project, Zt)
    E, norms = _normalize_forward(V)
    return E, (cache, V, norms)


def compose_backward(heads: HeadParams, cache, dQ):
    """Gradients of the compose head for upstream dLoss/dQuery."""
    mlp_cache, V, norms = cache
    dV = _normalize_backward(V, norms, np.asarray(dQ, dtype=np.float64))
    grads, _ = mlp_backward_batch(heads.compose, mlp_cache, dV)
    return grads


def project_backward(heads: HeadParams, cache, dE):
    mlp_cache, V, norms = cache
    dV = _normalize_backward(V, norms, np.asarray(dE, dtype=np.float64))
    grads, _ = mlp_backward_batch(heads.project, mlp_cache, dV)
    return grads


@dataclass
class DsrHyper:
    """Stage-2 settings; loss constants follow the published configuration."""

    temperature: float = 0.07
    margin: float = 0.7
    tradeoff: float = 0.5
    learning_rate: float = 2e-5
    epochs: int = 10
    batch_size: int = 256
    align_enabled: bool = True
    recon_enabled: bool = True
    loss_mode: str = "airknow"
    exclusive_denominator: bool = False
    confidence_override: object = None   # constant c-hat, e.g. 0.0 for w/o Align
    confidence_cache: bool = False       # score once at the warm-up state

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature {self.temperature} must be positive")
        if not -1.0 < self.margin < 1.0:
            raise ConfigError(f"margin {self.margin} outside (-1, 1)")
        if self.tradeoff < 0:
            raise ConfigError(f"tradeoff {self.tradeoff} < 0")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size {self.batch_size} < 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.loss_mode not in ("airknow", "infonce"):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        if self.loss_mode == "airknow" and not (self.align_enabled
                                                or self.recon_enabled):
            raise ConfigError("both streams disabled")
        if self.confidence_override is not None:
            c = float(self.confidence_override)
            if not 0.0 <= c <= 1.0:
                raise ConfigError(f"confidence override {c} outside [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def _softmax_rows(S, tau, exclude_diagonal=False):
    logits = S / tau
    if exclude_diagonal:
        logits = logits.copy()
        np.fill_diagonal(logits, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    return P


def _chain_softmax(P, G, tau):
    """dLoss/dS from dLoss/dP through row softmax at temperature tau."""
    return (P * (G - (G * P).sum(axis=1, keepdims=True))) / tau


def _check_pair_batch(Zq, Zt, min_batch=2):
    Zq = np.atleast_2d(np.asarray(Zq, dtype=np.float64))
    Zt = np.atleast_2d(np.asarray(Zt, dtype=np.float64))
    if Zq.shape != Zt.shape:
        raise ShapeError(f"query shape {Zq.shape} != target shape {Zt.shape}")
    if Zq.shape[0] < min_batch:
        raise InputError(f"batch size {Zq.shape[0]} < {min_batch}")
    return Zq, Zt


def align_loss(Zq, Zt, c_hat, tau, exclude_diagonal=False):
    """Confidence-weighted suppression of off-diagonal match probabilities.

    Rows are assumed unit-norm so similarities are plain dot products.
    Returns (loss, dZq, dZt); log arguments are clamped at 1e-7 and clamped
    terms contribute zero gradient.
    """
    Zq, Zt = _check_pair_batch(Zq, Zt)
    c = np.asarray(c_hat, dtype=np.float64).ravel()
    B = Zq.shape[0]
    if c.shape[0] != B:
        raise ShapeError(f"{c.shape[0]} confidences for batch of {B}")
    S = Zq @ Zt.T
    P = _softmax_rows(S, tau, exclude_diagonal)
    off = ~np.eye(B, dtype=bool)
    comp = 1.0 - P
    loss = float(-(c[:, None] * np.log(np.maximum(comp, _EPS)) * off).sum() / B)
    G = np.where(off & (comp > _EPS), c[:, None] / np.maximum(comp, _EPS), 0.0) / B
    dS = _chain_softmax(P, G, tau)
    return loss, dS @ Zt, dS.T @ Zq


def recon_loss(Zq, Zt, c_hat, alpha, tau):
    """Hinge on own-pair similarity above the tolerance margin.

    Weighted by (1 - c_hat) and normalized by the total suspect mass C; when
    C is zero the stream has no members and the loss is zero with zero
    gradients.
    """
    Zq, Zt = _check_pair_batch(Zq, Zt, min_batch=1)
    c = np.asarray(c_hat, dtype=np.float64).ravel()
    B = Zq.shape[0]
    if c.shape[0] != B:
        raise ShapeError(f"{c.shape[0]} confidences for batch of {B}")
    w = 1.0 - c
    C = float(w.sum())
    if C == 0.0:
        return 0.0, np.zeros_like(Zq), np.zeros_like(Zt)
    diag = (Zq * Zt).sum(axis=1)
    active = diag > alpha
    loss = float((w * np.maximum(diag - alpha, 0.0) / tau).sum() / C)
    coeff = w * active / (tau * C)
    return loss, coeff[:, None] * Zt, coeff[:, None] * Zq


def infonce_loss(Zq, Zt, tau):
    """Plain cross-entropy on the diagonal of the row softmax."""
    Zq, Zt = _check_pair_batch(Zq, Zt)
    B = Zq.shape[0]
    S = Zq @ Zt.T
    P = _softmax_rows(S, tau)
    pii = np.diag(P)
    loss = float(-np.log(np.maximum(pii, _EPS)).mean())
    G = np.zeros_like(P)
    np.fill_diagonal(G, np.where(pii > _EPS, -1.0 / np.maximum(pii, _EPS), 0.0) / B)
    dS = _chain_softmax(P, G, tau)
    return loss, dS @ Zt, dS.T @ Zq


def total_objective(Zq, Zt, c_hat, hyper: DsrHyper):
    """Combined stage-2 objective, honoring stream flags and loss mode.

    Returns (loss, dZq, dZt, parts) with parts holding the per-stream values
    (nan where a stream does not apply).
    """
    if hyper.loss_mode == "infonce":
        loss, dZq, dZt = infonce_loss(Zq, Zt, hyper.temperature)
        return loss, dZq, dZt, {"l_align": float("nan"), "l_recon": float("nan")}
    if not (hyper.align_enabled or hyper.recon_enabled):
        raise ConfigError("both streams disabled")
    Zq2, Zt2 = _check_pair_batch(Zq, Zt)
    loss = 0.0
    dZq = np.zeros_like(Zq2)
    dZt = np.zeros_like(Zt2)
    parts = {"l_align": float("nan"), "l_recon": float("nan")}
    if hyper.align_enabled:
        la, gq, gt = align_loss(Zq2, Zt2, c_hat, hyper.temperature,
                                hyper.exclusive_denominator)
        loss += la
        dZq += gq
        dZt += gt
        parts["l_align"] = la
    if hyper.recon_enabled:
        lr_, gq, gt = recon_loss(Zq2, Zt2, c_hat, hyper.margin, hyper.temperature)
        loss += hyper.tradeoff * lr_
        dZq += hyper.tradeoff * gq
        dZt += hyper.tradeoff * gt
        parts["l_recon"] = lr_
    return loss, dZq, dZt, parts


@dataclass
class EpochStats:
    epoch: int
    l_align: float
    l_recon: float
    l_total: float
    c_hat_by_id: dict = field(default_factory=dict)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    def final_loss(self) -> float:
        return self.epochs[-1].l_total if self.epochs else float("nan")


def train_stage2(dataset, eki_params, eki_hyper, heads: HeadParams,
                 hyper: DsrHyper, seed: int):
    """Train both heads with the frozen proxy as gate.

    Confidences come from current, gradient-detached embeddings each batch.
    Returns (trained HeadParams, TrainReport); the given heads and proxy are
    never mutated.
    """
    if len(dataset) < 2:
        raise ConfigError("dataset too small to train")
    use_proxy = hyper.loss_mode == "airknow" and hyper.confidence_override is None
    if use_proxy:
        if eki_params is None:
            raise ConfigError("airknow mode needs trained proxy parameters")
        expected = _eki.gdv_dim(eki_hyper.gdv_variant, dataset.dim)
        if eki_params.input_dim != expected:
            raise ConfigError(
                f"proxy input dim {eki_params.input_dim} != GDV dim {expected} "
                f"for variant {eki_hyper.gdv_variant!r}"
            )

    trained = heads.copy()
    Zr_all, Zm_all, Zt_all = dataset.arrays()
    ids = [t.id for t in dataset.triplets]
    n = len(dataset)
    root = RngState(seed, STREAM_DSR)
    report = TrainReport()

    cached_c = None
    if use_proxy and hyper.confidence_cache:
        # score every sample once against the entry (warm-up) head state
        Zq0, _ = compose_query_batch(heads, Zr_all, Zm_all)
        Zte0, _ = project_targets_batch(heads, Zt_all)
        gdv0 = _eki.compose_gdv_batch(Zq0, Zte0, eki_hyper.gdv_variant,
                                      z_r=Zr_all, z_m=Zm_all)
        cached_c = _eki.infer_confidence_batch(
            eki_params, gdv0, T=eki_hyper.mc_passes, p=eki_hyper.dropout,
            rng=root.derive(23))

    for epoch in range(hyper.epochs):
        order = root.derive(21, epoch).generator().permutation(n)
        sums = {"l_align": 0.0, "l_recon": 0.0, "l_total": 0.0}
        counts = {"l_align": 0, "l_recon": 0, "l_total": 0}
        c_by_id = {}
        for step, start in enumerate(range(0, n, hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            if len(idx) < 2:
                continue
            Zq, q_cache = compose_query_batch(trained, Zr_all[idx], Zm_all[idx])
            Zte, t_cache = project_targets_batch(trained, Zt_all[idx])
            if hyper.loss_mode == "infonce":
                c_hat = None
            elif hyper.confidence_override is not None:
                c_hat = np.full(len(idx), float(hyper.confidence_override))
            elif cached_c is not None:
                c_hat = cached_c[idx]
            else:
                gdv = _eki.compose_gdv_batch(Zq, Zte, eki_hyper.gdv_variant,
                                             z_r=Zr_all[idx], z_m=Zm_all[idx])
                c_hat = _eki.infer_confidence_batch(
                    eki_params, gdv, T=eki_hyper.mc_passes,
                    p=eki_hyper.dropout, rng=root.derive(22, epoch, step),
                )
            loss, dZq, dZt, parts = total_objective(Zq, Zte, c_hat, hyper)
            cg = compose_backward(trained, q_cache, dZq)
            pg = project_backward(trained, t_cache, dZt)
            for k in range(trained.compose.n_layers):
                trained.compose.weights[k] -= hyper.learning_rate * cg.weights[k]
                trained.compose.biases[k] -= hyper.learning_rate * cg.biases[k]
            for k in range(trained.project.n_layers):
                trained.project.weights[k] -= hyper.learning_rate * pg.weights[k]
                trained.project.biases[k] -= hyper.learning_rate * pg.biases[k]

            b = len(idx)
            sums["l_total"] += loss * b
            counts["l_total"] += b
            for key in ("l_align", "l_recon"):
                if not np.isnan(parts[key]):
                    sums[key] += parts[key] * b
                    counts[key] += b
            if c_hat is not None:
                for i, c in zip(idx, c_hat):
                    c_by_id[ids[i]] = float(c)
        report.epochs.append(EpochStats(
            epoch,
            sums["l_align"] / counts["l_align"] if counts["l_align"] else float("nan"),
            sums["l_recon"] / counts["l_recon"] if counts["l_recon"] else float("nan"),
            sums["l_total"] / counts["l_total"] if counts["l_total"] else float("nan"),
            c_by_id,
        ))
    return trained, report
