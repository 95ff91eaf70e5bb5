"""Mode experts: learned token selection and directed cross-attention.

One expert per mode (molecule, disease, criteria). Each owns a selection
head and the query/key/value projections used whenever that mode is the
*destination* of a directed interaction.

Selection: confidence p = sigmoid(S @ select_w) per token. A token is kept
when p clears the threshold (direction configurable) and the token is
valid. Kept tokens are rescaled by p, dropped tokens become zero rows; the
keep/drop decision itself is treated as a constant so gradients flow only
through the p factor.

Interaction I[src->dst] attends the selected source tokens over ALL valid
destination tokens using the destination expert's projections. Output rows
for dropped or padded source tokens are emitted as zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import xavier
from .errors import ConfigError, DegenerateMaskError

MODES = ("mol", "dis", "crit")

# Canonical interaction order; fusion concatenates in exactly this order.
INTERACTION_ORDER = (
    ("mol", "dis"),
    ("dis", "mol"),
    ("crit", "dis"),
    ("dis", "crit"),
    ("mol", "crit"),
    ("crit", "mol"),
)

# Interaction pairs that describe the same mode pairing from both ends;
# the agreement objective pulls these together.
POSITIVE_PAIRS = (
    (("mol", "dis"), ("dis", "mol")),
    (("crit", "mol"), ("mol", "crit")),
    (("crit", "dis"), ("dis", "crit")),
)


@dataclass
class ModeExpertParams:
    select_w: Tensor  # [d_k, 1]
    query_w: Tensor   # [d_k, d_k]
    key_w: Tensor     # [d_k, d_k]
    value_w: Tensor   # [d_k, d_k]

    def named(self, prefix: str):
        yield f"{prefix}.select_w", self.select_w
        yield f"{prefix}.query_w", self.query_w
        yield f"{prefix}.key_w", self.key_w
        yield f"{prefix}.value_w", self.value_w


def init_mode_expert(rng, d_k: int) -> ModeExpertParams:
    return ModeExpertParams(
        select_w=Tensor(xavier(rng, d_k, 1), requires_grad=True),
        query_w=Tensor(xavier(rng, d_k, d_k), requires_grad=True),
        key_w=Tensor(xavier(rng, d_k, d_k), requires_grad=True),
        value_w=Tensor(xavier(rng, d_k, d_k), requires_grad=True),
    )


@dataclass
class SelectionResult:
    probs: Tensor         # [B, n, 1] selection confidence
    hard_mask: np.ndarray  # [B, n] bool, kept AND valid
    selected: Tensor      # [B, n, d_k] p-weighted tokens, zero rows where dropped


def select_tokens(
    expert: ModeExpertParams,
    tokens: Tensor,
    valid: np.ndarray,
    threshold: float = 0.5,
    direction: str = "keep_high",
    hard_override: np.ndarray | None = None,
    grad_mode: str = "straight_through",
) -> SelectionResult:
    """Gate [B, n, d_k] tokens by the expert's selection head.

    hard_override replaces the thresholded keep decision (used by the
    all/random selection variants); overridden-in tokens are still
    p-weighted so the comparison isolates the decision rule.

    grad_mode "straight_through" treats the keep indicator as constant 1
    in the backward pass, so a dropped token's confidence still receives
    gradient and the prediction loss can argue it back above threshold.
    "blocked" is the exact local derivative: dropped tokens get none.
    Forward values are identical either way.
    """
    probs = ad.sigmoid(ad.matmul(tokens, expert.select_w))
    flat = probs.data[:, :, 0]
    if hard_override is not None:
        hard = hard_override & valid
    elif direction == "keep_high":
        hard = (flat >= threshold) & valid
    elif direction == "keep_low":
        hard = (flat <= threshold) & valid
    else:
        raise ConfigError(f"unknown indicator_direction {direction!r}")
    indicator = hard[:, :, None].astype(np.float64)
    if grad_mode == "straight_through":
        # forward p*indicator, backward d/dp = 1: add the constant p*(I-1)
        gate = ad.add_const(probs, probs.data * (indicator - 1.0))
    elif grad_mode == "blocked":
        gate = ad.mul_const(probs, indicator)
    else:
        raise ConfigError(f"unknown selection_gradient {grad_mode!r}")
    return SelectionResult(probs=probs, hard_mask=hard, selected=ad.scale_rows(tokens, gate))


def random_hard_mask(rng: np.random.Generator, learned_hard: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per trial: keep as many tokens as the learned rule did, chosen uniformly
    among that trial's valid tokens."""
    out = np.zeros_like(valid)
    for b in range(valid.shape[0]):
        idx = np.flatnonzero(valid[b])
        k = int(learned_hard[b].sum())
        if k > 0 and idx.size > 0:
            out[b, rng.choice(idx, size=min(k, idx.size), replace=False)] = True
    return out


def cross_attend(
    dest_expert: ModeExpertParams,
    source_selected: Tensor,
    dest_tokens: Tensor,
    dest_valid: np.ndarray,
    source_hard: np.ndarray,
    scale: float | None = None,
) -> Tensor:
    """Directed interaction: selected source tokens query all valid
    destination tokens. All three projections belong to the destination
    expert. Returns [B, n_src, d_k] with dropped/padded source rows zeroed.
    """
    d_k = dest_expert.query_w.shape[0]
    if scale is None:
        scale = 1.0 / np.sqrt(d_k)
    if not dest_valid.any(axis=1).all():
        bad = int(np.flatnonzero(~dest_valid.any(axis=1))[0])
        raise DegenerateMaskError(f"trial {bad} has no valid destination tokens to attend over")
    q = ad.matmul(source_selected, dest_expert.query_w)
    k = ad.matmul(dest_tokens, dest_expert.key_w)
    v = ad.matmul(dest_tokens, dest_expert.value_w)
    scores = ad.mul_const(ad.matmul(q, ad.transpose_last2(k)), scale)
    attn = ad.softmax_rows(scores, dest_valid[:, None, :], empty_rows="error")
    out = ad.matmul(attn, v)
    return ad.mul_const(out, source_hard[:, :, None].astype(np.float64))


@dataclass
class InteractionSet:
    tensors: dict    # (src, dst) -> Tensor [B, n_src, d_k]
    masks: dict      # (src, dst) -> [B, n_src] validity of the source rows

    def ordered(self):
        return [(pair, self.tensors[pair], self.masks[pair]) for pair in INTERACTION_ORDER]


def run_experts(
    experts: dict,
    enriched: dict,
    valid: dict,
    threshold: float = 0.5,
    direction: str = "keep_high",
    variant: str = "learned",
    rng: np.random.Generator | None = None,
    grad_mode: str = "straight_through",
) -> tuple[dict, InteractionSet]:
    """Select tokens per mode, then build all six directed interactions.

    enriched/valid map mode name -> [B, n, d_k] Tensor / [B, n] bool mask.
    variant: "learned" thresholds the confidence head, "all" keeps every
    valid token, "random" keeps a count-matched uniform draw per trial
    (requires rng). Returns (per-mode SelectionResult, InteractionSet).
    """
    selections = {}
    for mode in MODES:
        sel = select_tokens(experts[mode], enriched[mode], valid[mode], threshold,
                            direction, grad_mode=grad_mode)
        if variant == "all":
            sel = select_tokens(experts[mode], enriched[mode], valid[mode], threshold,
                                direction, hard_override=valid[mode], grad_mode=grad_mode)
        elif variant == "random":
            if rng is None:
                raise ConfigError("random selection variant needs an rng")
            sel = select_tokens(experts[mode], enriched[mode], valid[mode], threshold,
                                direction, hard_override=random_hard_mask(rng, sel.hard_mask, valid[mode]),
                                grad_mode=grad_mode)
        elif variant != "learned":
            raise ConfigError(f"unknown token_selection variant {variant!r}")
        selections[mode] = sel

    tensors, masks = {}, {}
    for src, dst in INTERACTION_ORDER:
        if not valid[dst].any(axis=1).all():
            bad = int(np.flatnonzero(~valid[dst].any(axis=1))[0])
            raise DegenerateMaskError(
                f"interaction {src}->{dst}: trial {bad} has no valid {dst} tokens")
        tensors[(src, dst)] = cross_attend(
            experts[dst], selections[src].selected, enriched[dst],
            valid[dst], selections[src].hard_mask)
        masks[(src, dst)] = valid[src]
    return selections, InteractionSet(tensors=tensors, masks=masks)


@dataclass
class UsageRow:
    mode: str
    group: int            # trials with exactly this many valid tokens
    index: int            # token position within the group
    trials: int           # group size
    ratio: float          # fraction of the group keeping this position
    always_selected: bool  # single-token trials keep their token by convention


def token_usage_stats(hard_masks: dict, valid_masks: dict) -> list[UsageRow]:
    """Selection-frequency table: for each mode and each valid-count group,
    how often each token position was kept. The denominator at a position is
    the number of trials in the group where that position is valid, so a
    threshold that keeps everything reports ratio 1.0 at every reported row
    (criteria rows pad between the inclusion and exclusion segments, so a
    position can be invalid for some members of a group). Group-of-one rows
    are flagged: with one candidate the keep decision carries no
    information."""
    rows = []
    for mode in MODES:
        hard, valid = np.asarray(hard_masks[mode]), np.asarray(valid_masks[mode])
        counts = valid.sum(axis=1).astype(int)
        for g in sorted(set(counts.tolist())):
            if g == 0:
                continue
            members = counts == g
            kept = hard[members]
            ok = valid[members]
            for j in range(valid.shape[1]):
                n = int(ok[:, j].sum())
                if n == 0:
                    continue
                rows.append(UsageRow(
                    mode=mode, group=g, index=j, trials=n,
                    ratio=float(kept[ok[:, j], j].mean()),
                    always_selected=(g == 1),
                ))
    return rows
