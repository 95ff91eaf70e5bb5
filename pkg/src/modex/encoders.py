"""Per-mode transformer encoder stacks (stage that enriches raw embeddings).

Each stack: a learned input projection from the mode's raw dimension to the
shared model width d_k, then `layers` post-norm encoder layers (multi-head
self-attention with key masking, residual, layer norm, ReLU feed-forward,
residual, layer norm). Padded rows are excluded as keys everywhere and the
stack output zeroes them, so appending padding never changes valid rows.

Inclusion and exclusion criteria share one stack (siamese: the same
parameter tensors are applied to both lists, so one gradient step moves
both identically), with optional sinusoidal position information added to
the raw inputs using separate per-list position indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """Standard alternating sin/cos position table, positions 0..length-1."""
    if dim % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dim, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


@dataclass
class EncoderLayerParams:
    q_w: list[Tensor]
    q_b: list[Tensor]
    k_w: list[Tensor]
    k_b: list[Tensor]
    v_w: list[Tensor]
    v_b: list[Tensor]
    out_w: Tensor
    out_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ffn1_w: Tensor
    ffn1_b: Tensor
    ffn2_w: Tensor
    ffn2_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix: str):
        for h in range(len(self.q_w)):
            yield f"{prefix}.h{h}.q_w", self.q_w[h]
            yield f"{prefix}.h{h}.q_b", self.q_b[h]
            yield f"{prefix}.h{h}.k_w", self.k_w[h]
            yield f"{prefix}.h{h}.k_b", self.k_b[h]
            yield f"{prefix}.h{h}.v_w", self.v_w[h]
            yield f"{prefix}.h{h}.v_b", self.v_b[h]
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b
        yield f"{prefix}.ln1_g", self.ln1_g
        yield f"{prefix}.ln1_b", self.ln1_b
        yield f"{prefix}.ffn1_w", self.ffn1_w
        yield f"{prefix}.ffn1_b", self.ffn1_b
        yield f"{prefix}.ffn2_w", self.ffn2_w
        yield f"{prefix}.ffn2_b", self.ffn2_b
        yield f"{prefix}.ln2_g", self.ln2_g
        yield f"{prefix}.ln2_b", self.ln2_b


@dataclass
class EncoderStackParams:
    in_w: Tensor
    in_b: Tensor
    layers: list[EncoderLayerParams]
    heads: int
    d_k: int

    def named(self, prefix: str):
        yield f"{prefix}.in_w", self.in_w
        yield f"{prefix}.in_b", self.in_b
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{i}")


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_encoder_layer(rng, d_k: int, heads: int, ffn_dim: int) -> EncoderLayerParams:
    head_dim = d_k // heads
    mk = lambda fi, fo: _param(xavier(rng, fi, fo))
    return EncoderLayerParams(
        q_w=[mk(d_k, head_dim) for _ in range(heads)],
        q_b=[_param(np.zeros(head_dim)) for _ in range(heads)],
        k_w=[mk(d_k, head_dim) for _ in range(heads)],
        k_b=[_param(np.zeros(head_dim)) for _ in range(heads)],
        v_w=[mk(d_k, head_dim) for _ in range(heads)],
        v_b=[_param(np.zeros(head_dim)) for _ in range(heads)],
        out_w=mk(d_k, d_k),
        out_b=_param(np.zeros(d_k)),
        ln1_g=_param(np.ones(d_k)),
        ln1_b=_param(np.zeros(d_k)),
        ffn1_w=mk(d_k, ffn_dim),
        ffn1_b=_param(np.zeros(ffn_dim)),
        ffn2_w=mk(ffn_dim, d_k),
        ffn2_b=_param(np.zeros(d_k)),
        ln2_g=_param(np.ones(d_k)),
        ln2_b=_param(np.zeros(d_k)),
    )


def init_encoder_stack(rng, d_in: int, d_k: int, heads: int, layers: int, ffn_dim: int) -> EncoderStackParams:
    if d_k % heads != 0:
        raise ConfigError(f"d_k={d_k} not divisible by heads={heads}")
    return EncoderStackParams(
        in_w=_param(xavier(rng, d_in, d_k)),
        in_b=_param(np.zeros(d_k)),
        layers=[init_encoder_layer(rng, d_k, heads, ffn_dim) for _ in range(layers)],
        heads=heads,
        d_k=d_k,
    )


def _encoder_layer(lp: EncoderLayerParams, h: Tensor, mask: np.ndarray) -> Tensor:
    head_dim = lp.q_w[0].shape[1]
    key_mask = mask[:, None, :]  # same key set for every query row
    heads_out = []
    for i in range(len(lp.q_w)):
        q = ad.linear(h, lp.q_w[i], lp.q_b[i])
        k = ad.linear(h, lp.k_w[i], lp.k_b[i])
        v = ad.linear(h, lp.v_w[i], lp.v_b[i])
        scores = ad.mul_const(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(head_dim))
        attn = ad.softmax_rows(scores, key_mask, empty_rows="zero")
        heads_out.append(ad.matmul(attn, v))
    merged = ad.linear(ad.concat(heads_out, axis=2), lp.out_w, lp.out_b)
    h = ad.layer_norm(ad.add(h, merged), lp.ln1_g, lp.ln1_b)
    ff = ad.linear(ad.relu(ad.linear(h, lp.ffn1_w, lp.ffn1_b)), lp.ffn2_w, lp.ffn2_b)
    return ad.layer_norm(ad.add(h, ff), lp.ln2_g, lp.ln2_b)


def encode_mode(
    params: EncoderStackParams,
    x: np.ndarray,
    mask: np.ndarray,
    pe: np.ndarray | None = None,
) -> Tensor:
    """Enrich one mode: [B, n, d_in] + bool mask [B, n] -> [B, n, d_k].

    pe, when given, is a [n, d_in] constant added to the raw inputs before
    projection. Rows whose mask is False come back exactly zero; a trial
    whose mask is entirely False yields all-zero rows rather than an error.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ConfigError(f"encode_mode expects [B, n, d] with mask [B, n], got {x.shape}")
    if pe is not None:
        x = x + pe[None, : x.shape[1], :]
    h = ad.linear(Tensor(x), params.in_w, params.in_b)
    for lp in params.layers:
        h = _encoder_layer(lp, h, mask)
    return ad.mul_const(h, mask[:, :, None].astype(np.float64))


def encode_criteria(
    params: EncoderStackParams,
    inc: np.ndarray,
    inc_mask: np.ndarray,
    exc: np.ndarray,
    exc_mask: np.ndarray,
    use_pe: bool,
) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
    """Run the shared criteria stack over both statement lists.

    Position indices restart at 0 for each list (inclusion and exclusion are
    separate sequences that merely share the encoder). Returns the enriched
    inclusion block, exclusion block, their concatenation along the token
    axis, and the concatenated validity mask.
    """
    pe = None
    if use_pe:
        pe = sinusoidal_pe(max(inc.shape[1], exc.shape[1]), inc.shape[2])
    ic = encode_mode(params, inc, inc_mask, pe)
    ec = encode_mode(params, exc, exc_mask, pe)
    cat = ad.concat([ic, ec], axis=1)
    cat_mask = np.concatenate([inc_mask, exc_mask], axis=1)
    return ic, ec, cat, cat_mask
