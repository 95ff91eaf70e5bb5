"""Full model assembly: parameter container, initialization, forward pass,
and loss computation over a padded batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .data import PaddedBatch
from .encoders import (
    EncoderStackParams,
    encode_criteria,
    encode_mode,
    init_encoder_stack,
)
from .errors import DegenerateTrialError
from .experts import (
    MODES,
    InteractionSet,
    ModeExpertParams,
    SelectionResult,
    init_mode_expert,
    run_experts,
)
from .fusion import FusionOutput, HeadParams, fuse_and_predict, init_fusion_stack, init_head
from .losses import LossBreakdown, cauchy_loss, combine_losses, contrastive_loss, wbce_loss

INIT_STREAM = 0  # rng domain for parameter initialization


@dataclass
class ModelParams:
    mol_stack: EncoderStackParams
    dis_stack: EncoderStackParams
    crit_stack: EncoderStackParams  # shared by inclusion AND exclusion lists
    experts: dict  # mode -> ModeExpertParams
    fusion_stack: EncoderStackParams
    head: HeadParams

    def named_tensors(self):
        """Deterministic (name, Tensor) walk over every trainable array."""
        yield from self.mol_stack.named("mol_stack")
        yield from self.dis_stack.named("dis_stack")
        yield from self.crit_stack.named("crit_stack")
        for mode in MODES:
            yield from self.experts[mode].named(f"expert.{mode}")
        yield from self.fusion_stack.named("fusion_stack")
        yield from self.head.named("head")

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    def parameter_count(self):
        return sum(t.data.size for t in self.tensors())


def init_model_params(config: RunConfig, dims: tuple[int, int, int]) -> ModelParams:
    """dims = (d_mol, d_dis, d_txt) raw embedding widths."""
    d_mol, d_dis, d_txt = dims
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, INIT_STREAM]))
    c = config
    return ModelParams(
        mol_stack=init_encoder_stack(rng, d_mol, c.d_k, c.heads, c.layers, c.ffn_dim),
        dis_stack=init_encoder_stack(rng, d_dis, c.d_k, c.heads, c.layers, c.ffn_dim),
        crit_stack=init_encoder_stack(rng, d_txt, c.d_k, c.heads, c.layers, c.ffn_dim),
        experts={m: init_mode_expert(rng, c.d_k) for m in MODES},
        fusion_stack=init_fusion_stack(rng, c.d_k, c.heads, c.layers, c.ffn_dim),
        head=init_head(rng, c.d_k),
    )


@dataclass
class ForwardResult:
    probabilities: Tensor     # [B]
    fusion: FusionOutput
    selections: dict          # mode -> SelectionResult
    interactions: InteractionSet
    valid: dict               # mode -> [B, n] bool


def _check_degenerate(valid: dict):
    for mode in MODES:
        counts = valid[mode].sum(axis=1)
        if (counts == 0).any():
            bad = int(np.flatnonzero(counts == 0)[0])
            raise DegenerateTrialError(
                f"trial index {bad} has no valid {mode} tokens; a trial must "
                f"carry at least one molecule, one disease, and one criteria "
                f"statement to be scored")


def forward(
    params: ModelParams,
    batch: PaddedBatch,
    config: RunConfig,
    selection_rng: np.random.Generator | None = None,
) -> ForwardResult:
    mol = encode_mode(params.mol_stack, batch.mol, batch.mol_mask)
    dis = encode_mode(params.dis_stack, batch.dis, batch.dis_mask)
    _, _, crit, crit_mask = encode_criteria(
        params.crit_stack, batch.inc, batch.inc_mask, batch.exc, batch.exc_mask,
        use_pe=config.use_pe)
    enriched = {"mol": mol, "dis": dis, "crit": crit}
    valid = {"mol": batch.mol_mask, "dis": batch.dis_mask, "crit": crit_mask}
    _check_degenerate(valid)
    selections, interactions = run_experts(
        params.experts, enriched, valid,
        threshold=config.select_threshold,
        direction=config.indicator_direction,
        variant=config.token_selection,
        rng=selection_rng,
        grad_mode=config.selection_gradient,
    )
    fusion = fuse_and_predict(params.fusion_stack, params.head, interactions)
    return ForwardResult(
        probabilities=fusion.probabilities,
        fusion=fusion,
        selections=selections,
        interactions=interactions,
        valid=valid,
    )


def compute_losses(
    result: ForwardResult,
    labels: np.ndarray,
    weights: tuple[float, float],
    config: RunConfig,
) -> LossBreakdown:
    """Classification + weighted auxiliary terms for one batch.

    Lambdas come from the config AFTER variant resolution; a zero lambda
    keeps the term out of the gradient while its value is still reported.
    """
    w0, w1 = weights
    cls = wbce_loss(result.probabilities, labels, w0, w1,
                    swap_weights=config.swap_class_weights)
    sparsity = cauchy_loss(
        [(result.selections[m].probs, result.valid[m]) for m in MODES],
        eps=config.cauchy_scale)
    agreement = contrastive_loss(
        result.interactions, config.temperature,
        denominator=config.contrastive_denominator)
    return combine_losses(cls, sparsity, agreement,
                          config.lambda_cauchy, config.lambda_contrastive)
