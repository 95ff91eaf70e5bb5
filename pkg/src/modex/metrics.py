"""Classification metrics and the bootstrap evaluation protocol.

All metrics are computed from scratch on float64 arrays: F1 at a decision
threshold, ROC-AUC as the rank statistic (ties get half credit), PR-AUC as
average precision (step integral, no interpolation). Bootstrap evaluation
re-scores `reps` subsamples of floor(fraction * n) indices drawn without
replacement (a with-replacement flag covers the classical variant) and
reports mean and standard deviation per metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefinedError, ShapeError

BOOTSTRAP_STREAM = 3  # rng domain for bootstrap index draws


def _check(scores: np.ndarray, labels: np.ndarray):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.isfinite(scores).all():
        raise MetricUndefinedError("scores contain non-finite values")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise MetricUndefinedError("labels must be 0 or 1")
    return scores, labels


def f1_score(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Harmonic mean of precision and recall at `threshold` (>= decides
    positive). Zero-denominator precision/recall/F1 terms are defined as 0."""
    scores, labels = _check(scores, labels)
    pred = scores >= threshold
    tp = float((pred & (labels == 1.0)).sum())
    fp = float((pred & (labels == 0.0)).sum())
    fn = float((~pred & (labels == 1.0)).sum())
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties averaged."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative; tied
    scores count half. Single-class labels are undefined."""
    scores, labels = _check(scores, labels)
    n_pos = int((labels == 1.0).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"ROC-AUC undefined: {n_pos} positives, {n_neg} negatives")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[labels == 1.0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision: sum over descending unique score thresholds of
    (recall step) * (precision after including the tie group)."""
    scores, labels = _check(scores, labels)
    n_pos = int((labels == 1.0).sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricUndefinedError(
            f"PR-AUC undefined: {n_pos} positives of {len(labels)}")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ap = 0.0
    tp = fp = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        group_tp = float(y[i:j + 1].sum())
        group_fp = (j - i + 1) - group_tp
        tp += group_tp
        fp += group_fp
        precision = tp / (tp + fp)
        ap += (group_tp / n_pos) * precision
        i = j + 1
    return ap


@dataclass
class MetricReport:
    f1: float
    pr_auc: float
    roc_auc: float
    f1_std: float = 0.0
    pr_auc_std: float = 0.0
    roc_auc_std: float = 0.0
    reps: int = 0
    fraction: float = 1.0
    seed: int = 0
    threshold: float = 0.5
    replicate_values: dict = field(default_factory=dict)

    def rows(self):
        return [
            ("f1", self.f1, self.f1_std),
            ("pr_auc", self.pr_auc, self.pr_auc_std),
            ("roc_auc", self.roc_auc, self.roc_auc_std),
        ]


def point_metrics(scores, labels, threshold=0.5) -> tuple[float, float, float]:
    return (
        f1_score(scores, labels, threshold),
        pr_auc(scores, labels),
        roc_auc(scores, labels),
    )


def bootstrap_eval(
    scores: np.ndarray,
    labels: np.ndarray,
    reps: int = 10,
    fraction: float = 0.8,
    seed: int = 0,
    threshold: float = 0.5,
    with_replacement: bool = False,
) -> MetricReport:
    """Evaluate on `reps` random subsamples of floor(fraction * n) indices.

    Each replicate draws without replacement by default. A replicate whose
    draw is single-class is redrawn once; a second single-class draw raises
    MetricUndefinedError. std uses ddof=1 (0.0 when reps == 1).
    """
    scores, labels = _check(scores, labels)
    if reps < 1:
        raise MetricUndefinedError(f"reps must be >= 1, got {reps}")
    if not 0.0 < fraction <= 1.0:
        raise MetricUndefinedError(f"fraction must be in (0, 1], got {fraction}")
    n = len(scores)
    m = int(np.floor(fraction * n))
    if m < 2:
        raise MetricUndefinedError(f"replicate size {m} too small (n={n})")
    vals = {"f1": [], "pr_auc": [], "roc_auc": []}
    for rep in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, BOOTSTRAP_STREAM, rep]))
        idx = rng.choice(n, size=m, replace=with_replacement)
        if len(np.unique(labels[idx])) < 2:
            idx = rng.choice(n, size=m, replace=with_replacement)
            if len(np.unique(labels[idx])) < 2:
                raise MetricUndefinedError(
                    f"replicate {rep} drew a single-class subsample twice")
        f, p, r = point_metrics(scores[idx], labels[idx], threshold)
        vals["f1"].append(f)
        vals["pr_auc"].append(p)
        vals["roc_auc"].append(r)

    def agg(xs):
        arr = np.asarray(xs)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return float(arr.mean()), std

    f1_m, f1_s = agg(vals["f1"])
    pr_m, pr_s = agg(vals["pr_auc"])
    roc_m, roc_s = agg(vals["roc_auc"])
    return MetricReport(
        f1=f1_m, pr_auc=pr_m, roc_auc=roc_m,
        f1_std=f1_s, pr_auc_std=pr_s, roc_auc_std=roc_s,
        reps=reps, fraction=fraction, seed=seed, threshold=threshold,
        replicate_values=vals,
    )
