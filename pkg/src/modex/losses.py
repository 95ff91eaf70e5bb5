"""Training objectives.

Three parts, combined as classification + lambda_cauchy * sparsity +
lambda_contrastive * agreement:

* sparsity: a heavy-tailed penalty sum(log(1 + p^2/eps)) over every valid
  token's selection confidence, averaged over the batch. Pushes confidences
  toward zero without the gradient vanishing for large p.
* agreement: the six interactions are pooled to one vector each; the three
  mirror-image pairs (src->dst vs dst->src) are pulled together against all
  thirty ordered pairings via a temperature-scaled softmax over cosine
  similarities.
* classification: weighted binary cross-entropy with the negative-class
  fraction multiplying the positive log term (rare positives get the louder
  voice); `swap_weights` flips the placement for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .experts import INTERACTION_ORDER, POSITIVE_PAIRS, InteractionSet

PROB_CLIP = 1e-7


def cauchy_loss(probs_and_masks: list, eps: float) -> Tensor:
    """Batch mean of sum over valid tokens of log(1 + p^2 / eps).

    probs_and_masks: [(probs Tensor [B, n, 1], valid bool [B, n]), ...],
    one entry per mode.
    """
    total = None
    batch = None
    for probs, valid in probs_and_masks:
        if probs.shape[:2] != valid.shape:
            raise ShapeError(f"probs {probs.shape} vs mask {valid.shape}")
        batch = probs.shape[0]
        p2 = ad.mul(probs, probs)
        term = ad.log(ad.add_const(ad.mul_const(p2, 1.0 / eps), 1.0))
        masked = ad.mul_const(term, valid[:, :, None].astype(np.float64))
        s = ad.sum_all(masked)
        total = s if total is None else ad.add(total, s)
    return ad.mul_const(total, 1.0 / batch)


def pool_interaction(tensor: Tensor, mask: np.ndarray) -> Tensor:
    """[B, n, d] -> [B, d] mean over rows the mask keeps; all-masked trials
    pool to zero vectors (cosine treats those as similarity 0)."""
    return ad.masked_mean_rows(tensor, mask, empty_rows="zero")


def enumerate_interaction_pairs():
    """All ordered pairs of distinct interactions: 6 * 5 = 30."""
    return [(a, b) for a in INTERACTION_ORDER for b in INTERACTION_ORDER if a != b]


def contrastive_loss(
    interactions: InteractionSet,
    temperature: float,
    denominator: str = "global",
) -> Tensor:
    """Agreement objective over pooled interaction vectors.

    For each of the three mirror pairs, -log of the softmax weight its
    similarity gets among candidate pairs. "global" scores every positive
    against all 30 ordered pairings with one shared denominator; the
    "per_anchor" variant restricts each denominator to the 5 pairings
    sharing the positive's anchor (both directions contribute a term).
    Identical pooled vectors give exactly 3 * ln(30) under "global".
    """
    pooled = {pair: pool_interaction(interactions.tensors[pair], interactions.masks[pair])
              for pair in INTERACTION_ORDER}
    # cosine is symmetric: compute each unordered pairing once, reuse both ways
    sims = {}
    for i, a in enumerate(INTERACTION_ORDER):
        for b in INTERACTION_ORDER[i + 1:]:
            z = ad.mul_const(ad.cosine_rows(pooled[a], pooled[b]), 1.0 / temperature)
            sims[(a, b)] = z
            sims[(b, a)] = z
    batch = next(iter(pooled.values())).shape[0]

    def lse(pairs):
        cols = [ad.reshape(sims[p], (batch, 1)) for p in pairs]
        z = ad.concat(cols, axis=1)
        m = np.max(z.data, axis=1, keepdims=True)  # detached shift
        e = ad.exp(ad.add_const(z, -m))
        return ad.add_const(ad.log(ad.sum_axis(e, axis=1)), m[:, 0])

    per_trial = None
    if denominator == "global":
        denom = lse(enumerate_interaction_pairs())
        for a, b in POSITIVE_PAIRS:
            term = ad.add(denom, ad.mul_const(sims[(a, b)], -1.0))
            per_trial = term if per_trial is None else ad.add(per_trial, term)
    elif denominator == "per_anchor":
        for a, b in POSITIVE_PAIRS:
            for anchor, other in ((a, b), (b, a)):
                denom = lse([(anchor, x) for x in INTERACTION_ORDER if x != anchor])
                term = ad.add(denom, ad.mul_const(sims[(anchor, other)], -1.0))
                per_trial = term if per_trial is None else ad.add(per_trial, term)
    else:
        raise ShapeError(f"unknown contrastive denominator {denominator!r}")
    return ad.mean_all(per_trial)


def wbce_loss(
    y_hat: Tensor,
    y: np.ndarray,
    w0: float,
    w1: float,
    swap_weights: bool = False,
) -> Tensor:
    """Weighted binary cross-entropy, batch mean.

    L_i = -w0 * y_i * log(yhat_i) - w1 * (1 - y_i) * log(1 - yhat_i)

    Callers pass w0 = fraction of negatives, so when positives are rare
    their log term carries the larger multiplier. swap_weights exchanges
    w0/w1. Predictions are clipped to [1e-7, 1 - 1e-7] before the logs.
    """
    if y_hat.shape != y.shape:
        raise ShapeError(f"predictions {y_hat.shape} vs labels {y.shape}")
    if swap_weights:
        w0, w1 = w1, w0
    y = y.astype(np.float64)
    p = ad.clip(y_hat, PROB_CLIP, 1.0 - PROB_CLIP)
    pos = ad.mul_const(ad.log(p), -w0 * y)
    neg = ad.mul_const(ad.log(ad.add_const(ad.mul_const(p, -1.0), 1.0)), -w1 * (1.0 - y))
    return ad.mean_all(ad.add(pos, neg))


@dataclass
class LossBreakdown:
    total: Tensor
    classification: float
    sparsity: float
    agreement: float


def combine_losses(
    classification: Tensor,
    sparsity: Tensor | None,
    agreement: Tensor | None,
    lambda_cauchy: float,
    lambda_contrastive: float,
) -> LossBreakdown:
    total = classification
    s_val = a_val = 0.0
    if sparsity is not None and lambda_cauchy != 0.0:
        total = ad.add(total, ad.mul_const(sparsity, lambda_cauchy))
        s_val = float(sparsity.data)
    elif sparsity is not None:
        s_val = float(sparsity.data)
    if agreement is not None and lambda_contrastive != 0.0:
        total = ad.add(total, ad.mul_const(agreement, lambda_contrastive))
        a_val = float(agreement.data)
    elif agreement is not None:
        a_val = float(agreement.data)
    return LossBreakdown(
        total=total,
        classification=float(classification.data),
        sparsity=s_val,
        agreement=a_val,
    )
