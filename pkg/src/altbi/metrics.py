"""Ranking metrics for outlier scores (label 1 = outlier, higher score = more outlying)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    labels = labels.astype(int)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 (inlier) or 1 (outlier)")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("both classes must be present")
    return scores, labels, n_pos, labels.size - n_pos


def _midranks(scores):
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # 1-based ranks, tied blocks share the mean of their positions
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    block_mid = first + (counts + 1) / 2.0
    ranks = np.empty(scores.size)
    ranks[order] = np.repeat(block_mid, counts)
    return ranks


def roc_auc(scores, labels):
    """Mann-Whitney estimate: P(outlier outscores inlier), ties count one half."""
    scores, labels, n_pos, n_neg = _check(scores, labels)
    ranks = _midranks(scores)
    # twice the U statistic is an integer; keeps the numerator exact
    u2 = 2.0 * ranks[labels == 1].sum() - n_pos * (n_pos + 1.0)
    return float(u2 / (2.0 * n_pos * n_neg))


def pr_auc(scores, labels):
    """Average precision over descending thresholds, tied scores forming one step."""
    scores, labels, n_pos, _ = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp_at = tp[last]
    n_at = last + 1
    gained = np.diff(np.r_[0, tp_at])
    total = 0.0
    for d, t, k in zip(gained, tp_at, n_at):
        if d:
            total += d * (t / k)
    return float(total / n_pos)


def kept_outlier_fraction(mask, labels, batch_indices=None):
    """Share of outliers among kept samples of a batch."""
    mask = np.asarray(mask, dtype=bool).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if batch_indices is not None:
        labels = labels[np.asarray(batch_indices)]
    if labels.shape != mask.shape:
        raise ValueError("mask and batch labels differ in length")
    kept = int(mask.sum())
    if kept == 0:
        raise ValueError("no kept samples")
    return float(labels[mask].sum() / kept)


@dataclass(frozen=True)
class EvalResult:
    auc: float
    prauc: float
    n_pos: int
    n_neg: int

    def as_dict(self):
        return {"auc": self.auc, "prauc": self.prauc, "n_pos": self.n_pos, "n_neg": self.n_neg}


def evaluate(scores, labels):
    _, labels, n_pos, n_neg = _check(scores, labels)
    return EvalResult(roc_auc(scores, labels), pr_auc(scores, labels), n_pos, n_neg)
