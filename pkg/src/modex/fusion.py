"""Interaction fusion and the prediction head.

The six directed interactions are concatenated along the token axis (46
rows at default caps), re-encoded by a final stack with no positional
signal, mean-pooled over rows whose source token was valid, passed through
a two-layer residual refinement, and squashed to one approval probability
per trial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderStackParams, init_encoder_stack, xavier
from .errors import DegenerateTrialError
from .experts import InteractionSet


@dataclass
class HeadParams:
    l1_w: Tensor
    l1_b: Tensor
    l2_w: Tensor
    l2_b: Tensor
    out_w: Tensor  # [d_k, 1]
    out_b: Tensor  # [1]

    def named(self, prefix: str):
        yield f"{prefix}.l1_w", self.l1_w
        yield f"{prefix}.l1_b", self.l1_b
        yield f"{prefix}.l2_w", self.l2_w
        yield f"{prefix}.l2_b", self.l2_b
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b


def init_head(rng, d_k: int) -> HeadParams:
    def p(a):
        return Tensor(a, requires_grad=True)

    return HeadParams(
        l1_w=p(xavier(rng, d_k, d_k)),
        l1_b=p(np.zeros(d_k)),
        l2_w=p(xavier(rng, d_k, d_k)),
        l2_b=p(np.zeros(d_k)),
        out_w=p(xavier(rng, d_k, 1)),
        out_b=p(np.zeros(1)),
    )


@dataclass
class FusionOutput:
    probabilities: Tensor  # [B]
    logits: Tensor         # [B]
    pooled: Tensor         # [B, d_k]
    fused_mask: np.ndarray  # [B, total_rows]


def fuse_and_predict(
    stack: EncoderStackParams,
    head: HeadParams,
    interactions: InteractionSet,
) -> FusionOutput:
    """Concatenate interactions in canonical order and predict per trial.

    A trial contributing zero valid rows across all six interactions cannot
    be pooled and raises DegenerateTrialError (upstream per-mode checks make
    this unreachable in the full pipeline, but the fusion stage re-checks
    because it is usable standalone)."""
    ordered = interactions.ordered()
    cat = ad.concat([t for _, t, _ in ordered], axis=1)
    mask = np.concatenate([m for _, _, m in ordered], axis=1)
    rows_per_trial = mask.sum(axis=1)
    if (rows_per_trial == 0).any():
        bad = int(np.flatnonzero(rows_per_trial == 0)[0])
        raise DegenerateTrialError(
            f"trial {bad} has no valid interaction rows to fuse")
    h = cat
    from .encoders import _encoder_layer  # same layer machinery, no PE here
    h = ad.linear(h, stack.in_w, stack.in_b)
    for lp in stack.layers:
        h = _encoder_layer(lp, h, mask)
    pooled = ad.masked_mean_rows(h, mask, empty_rows="error")
    refined = ad.add(pooled, ad.linear(
        ad.relu(ad.linear(pooled, head.l1_w, head.l1_b)), head.l2_w, head.l2_b))
    logits = ad.reshape(ad.linear(refined, head.out_w, head.out_b), (pooled.shape[0],))
    return FusionOutput(
        probabilities=ad.sigmoid(logits),
        logits=logits,
        pooled=pooled,
        fused_mask=mask,
    )


def init_fusion_stack(rng, d_k: int, heads: int, layers: int, ffn_dim: int) -> EncoderStackParams:
    # operates on already-projected d_k rows; the input projection is a
    # learned d_k -> d_k map
    return init_encoder_stack(rng, d_k, d_k, heads, layers, ffn_dim)
