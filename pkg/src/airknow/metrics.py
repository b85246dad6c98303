"""Retrieval and noise-detection metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .rng import RngState


def _ranks(scores, gt):
    """1-based rank of each query's ground truth; ties lose to lower indices."""
    n_gallery = scores.shape[1]
    idx = np.arange(n_gallery)
    gt_scores = scores[np.arange(scores.shape[0]), gt]
    higher = (scores > gt_scores[:, None]).sum(axis=1)
    tied_before = ((scores == gt_scores[:, None]) & (idx[None, :] < gt[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def recall_at_k(Zq, gallery, gt, ks):
    """Fraction of queries whose true target ranks within the top K.

    Ranking is by descending cosine similarity (rows must be unit-norm, so
    plain dot products); exact ties break toward the lower gallery index.
    """
    Zq = np.atleast_2d(np.asarray(Zq, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if gallery.shape[0] == 0:
        raise InputError("empty gallery")
    if Zq.shape[1] != gallery.shape[1]:
        raise ShapeError(f"query dim {Zq.shape[1]} != gallery dim {gallery.shape[1]}")
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if gt.shape[0] != Zq.shape[0]:
        raise ShapeError(f"{gt.shape[0]} ground-truth indices for {Zq.shape[0]} queries")
    if (gt < 0).any() or (gt >= gallery.shape[0]).any():
        raise InputError("ground-truth index outside gallery")
    ks = [int(k) for k in ks]
    if any(k < 1 or k > gallery.shape[0] for k in ks):
        raise InputError(f"ks {ks} outside [1, {gallery.shape[0]}]")
    ranks = _ranks(Zq @ gallery.T, gt)
    return {k: float((ranks <= k).mean()) for k in ks}


def subset_recall(Zq, gallery, gt, m_distractors, ks, rng: RngState):
    """Recall over {true target} + m seeded distractors per query.

    Distractors are drawn uniformly without replacement from the gallery
    excluding the true target; the tie rule matches :func:`recall_at_k`.
    """
    Zq = np.atleast_2d(np.asarray(Zq, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    gt = np.asarray(gt, dtype=np.int64).ravel()
    n_gallery = gallery.shape[0]
    if m_distractors < 0 or m_distractors + 1 > n_gallery:
        raise ConfigError(
            f"m_distractors {m_distractors} needs gallery > {m_distractors}"
        )
    ks = [int(k) for k in ks]
    if any(k < 1 or k > m_distractors + 1 for k in ks):
        raise ConfigError(f"ks {ks} outside [1, {m_distractors + 1}]")
    g = rng.generator()
    scores = Zq @ gallery.T
    hits = {k: 0 for k in ks}
    for i in range(Zq.shape[0]):
        draw = g.choice(n_gallery - 1, size=m_distractors, replace=False)
        distractors = np.where(draw >= gt[i], draw + 1, draw)  # skip the target
        cand = np.concatenate(([gt[i]], distractors))
        cand_scores = scores[i, cand]
        own = cand_scores[0]
        higher = (cand_scores > own).sum()
        tied_before = ((cand_scores == own) & (cand < gt[i])).sum()
        rank = 1 + higher + tied_before
        for k in ks:
            hits[k] += rank <= k
    n_q = Zq.shape[0]
    return {k: hits[k] / n_q for k in ks}


@dataclass
class DetectionResult:
    """Per-sample confidence against oracle cleanliness."""

    c_hat: np.ndarray
    labels: np.ndarray          # 1 = clean, 0 = noisy
    threshold: float = 0.5


def detection_metrics(det: DetectionResult) -> dict:
    """Accuracy / precision / recall at the threshold, plus rank AUC.

    Clean (label 1) is the positive class; the decision rule is
    c_hat > threshold. AUC credits ties 0.5 and is omitted when only one
    class is present.
    """
    c = np.asarray(det.c_hat, dtype=np.float64).ravel()
    y = np.asarray(det.labels).ravel().astype(int)
    if c.shape != y.shape:
        raise ShapeError(f"{c.shape[0]} confidences for {y.shape[0]} labels")
    if c.size == 0:
        raise InputError("empty detection input")
    if (c < 0).any() or (c > 1).any():
        raise InputError("confidences outside [0, 1]")
    pred = (c > det.threshold).astype(int)
    out = {"accuracy": float((pred == y).mean())}
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    out["precision"] = tp / (tp + fp) if tp + fp else 0.0
    out["recall"] = tp / (tp + fn) if tp + fn else 0.0
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos and n_neg:
        # Mann-Whitney with midranks
        order = np.argsort(c, kind="stable")
        ranks = np.empty_like(c)
        sorted_c = c[order]
        i = 0
        while i < c.size:
            j = i
            while j + 1 < c.size and sorted_c[j + 1] == sorted_c[i]:
                j += 1
            ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        r_pos = ranks[y == 1].sum()
        out["auc"] = float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    return out
