"""Optimization loop: Adam over every trainable tensor, seeded mini-batch
shuffling, validation-loss model selection with patience, an optional
retrain-on-combined phase, grid search over hyperparameter deltas, and a
byte-stable binary checkpoint format.

Checkpoint layout (version 1):
    magic "MODEXCKPT1\\n"
    u64 little-endian header length
    header: sorted-key JSON {format_version, config, config_hash, dims,
            tensors: [[name, shape], ...], rng_states}
    raw float64 buffers concatenated in header tensor order
No timestamps or container metadata, so identical runs produce identical
bytes (the determinism contract is a file-hash comparison).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import DatasetManifest, Splits, class_weights, pad_and_mask
from .errors import ConfigError, DataFormatError, NumericError, TrainingDivergedError
from .metrics import point_metrics
from .model import ModelParams, compute_losses, forward, init_model_params

SHUFFLE_STREAM = 1
SELECTION_STREAM = 2

CKPT_MAGIC = b"MODEXCKPT1\n"


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(named_tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, t in named_tensors:
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adam_step(named_tensors, state: AdamState) -> None:
    """Standard bias-corrected update, in place. Non-finite gradients abort
    naming the offending tensor."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in named_tensors:
        g = t.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_global_norm(named_tensors, max_norm: float) -> float:
    """Scale every gradient so the joint L2 norm is at most max_norm.
    Returns the pre-clip norm. max_norm <= 0 disables clipping."""
    sq = 0.0
    for _, t in named_tensors:
        sq += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, t in named_tensors:
            t.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# fit


@dataclass
class EpochLog:
    epoch: int
    train_total: float
    train_cls: float
    train_sparsity: float
    train_agreement: float
    val_total: float
    val_cls: float
    val_sparsity: float
    val_agreement: float
    val_f1: float
    val_pr_auc: float
    val_roc_auc: float


@dataclass
class TrainReport:
    epochs: list
    best_epoch: int
    best_val_total: float
    best_val_cls: float
    best_val_f1: float
    best_val_pr_auc: float
    best_val_roc_auc: float
    seed: int
    config_hash: str
    weights: tuple
    stopped_early: bool
    retrained: bool


def _slice_batch(batch, idx):
    from .data import PaddedBatch
    return PaddedBatch(
        mol=batch.mol[idx], dis=batch.dis[idx], inc=batch.inc[idx], exc=batch.exc[idx],
        mol_mask=batch.mol_mask[idx], dis_mask=batch.dis_mask[idx],
        inc_mask=batch.inc_mask[idx], exc_mask=batch.exc_mask[idx],
        labels=batch.labels[idx],
    )


def _evaluate_losses(params, padded, config, weights, selection_rng, batch_size):
    """Forward-only pass over a padded set in batches; returns loss means
    (sample-weighted) and the concatenated predictions."""
    n = len(padded.labels)
    totals = np.zeros(4)
    preds = np.zeros(n)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        sub = _slice_batch(padded, idx)
        out = forward(params, sub, config, selection_rng=selection_rng)
        lb = compute_losses(out, sub.labels, weights, config)
        k = len(idx)
        totals += k * np.array([float(lb.total.data), lb.classification,
                                lb.sparsity, lb.agreement])
        preds[idx] = out.probabilities.data
    totals /= n
    return totals, preds


def fit(
    manifest: DatasetManifest,
    train_records: list,
    valid_records: list,
    config: RunConfig,
    quiet: bool = True,
    log_fn=None,
) -> tuple[ModelParams, TrainReport]:
    """Train with seeded shuffling; keep the parameters from the epoch with
    the lowest total validation loss; stop after `patience` epochs without
    improvement. With retrain_on_combined, afterwards re-initialize and
    train train+validation for exactly the selected number of epochs with
    class weights recomputed on the union.
    """
    cfg = config.resolved()
    if not train_records:
        raise DataFormatError("empty training split")
    if not valid_records:
        raise DataFormatError("empty validation split")
    dims = (manifest.d_mol, manifest.d_dis, manifest.d_txt)
    caps = (cfg.mol_cap, cfg.dis_cap, cfg.inc_cap, cfg.exc_cap)
    train_pad = pad_and_mask(train_records, manifest, caps, cfg.aggregation)
    valid_pad = pad_and_mask(valid_records, manifest, caps, cfg.aggregation)
    weights = class_weights(train_pad.labels)

    params, logs, best = _fit_loop(
        cfg, dims, train_pad, valid_pad, weights, select_best=True, log_fn=log_fn)
    best_epoch, best_snapshot, best_log = best

    retrained = False
    if cfg.retrain_on_combined:
        combined = train_records + valid_records
        comb_pad = pad_and_mask(combined, manifest, caps, cfg.aggregation)
        comb_weights = class_weights(comb_pad.labels)
        # identical config and init; the validation set has served its
        # purpose, so train for exactly the selected epoch count
        params, _, _ = _fit_loop(
            cfg, dims, comb_pad, valid_pad, comb_weights,
            select_best=False, max_epochs=best_epoch + 1, log_fn=log_fn)
        retrained = True
    else:
        for (_, t), snap in zip(params.named_tensors(), best_snapshot):
            t.data = snap

    report = TrainReport(
        epochs=logs,
        best_epoch=best_epoch,
        best_val_total=best_log.val_total,
        best_val_cls=best_log.val_cls,
        best_val_f1=best_log.val_f1,
        best_val_pr_auc=best_log.val_pr_auc,
        best_val_roc_auc=best_log.val_roc_auc,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
        weights=weights,
        stopped_early=len(logs) < cfg.epochs,
        retrained=retrained,
    )
    return params, report


def _fit_loop(cfg, dims, train_pad, valid_pad, weights, select_best,
              max_epochs=None, log_fn=None):
    params = init_model_params(cfg, dims)
    named = list(params.named_tensors())
    adam = init_adam(named, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, SHUFFLE_STREAM]))
    selection_rng = None
    if cfg.token_selection == "random":
        selection_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, SELECTION_STREAM]))
    n = len(train_pad.labels)
    epochs = cfg.epochs if max_epochs is None else max_epochs
    logs = []
    best_epoch, best_val, best_snapshot, best_log = -1, np.inf, None, None
    since_best = 0
    step = 0
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            sub = _slice_batch(train_pad, idx)
            out = forward(params, sub, cfg, selection_rng=selection_rng)
            lb = compute_losses(out, sub.labels, weights, cfg)
            total = float(lb.total.data)
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    "loss became non-finite", epoch=epoch, step=step)
            lb.total.backward()
            try:
                clip_global_norm(named, cfg.clip_norm)
                adam_step(named, adam)
            except NumericError as e:
                raise TrainingDivergedError(str(e), epoch=epoch, step=step)
            for _, t in named:
                t.zero_grad()
            sums += len(idx) * np.array([total, lb.classification,
                                         lb.sparsity, lb.agreement])
            step += 1
        train_means = sums / n
        val_means, val_preds = _evaluate_losses(
            params, valid_pad, cfg, weights, selection_rng, cfg.batch_size)
        try:
            vf1, vpr, vroc = point_metrics(val_preds, valid_pad.labels,
                                           cfg.eval_threshold)
        except Exception:
            vf1 = vpr = vroc = float("nan")  # single-class validation split
        log = EpochLog(
            epoch=epoch,
            train_total=train_means[0], train_cls=train_means[1],
            train_sparsity=train_means[2], train_agreement=train_means[3],
            val_total=val_means[0], val_cls=val_means[1],
            val_sparsity=val_means[2], val_agreement=val_means[3],
            val_f1=vf1, val_pr_auc=vpr, val_roc_auc=vroc,
        )
        logs.append(log)
        if log_fn is not None:
            log_fn(log)
        if select_best:
            if val_means[0] < best_val:
                best_val = val_means[0]
                best_epoch = epoch
                best_snapshot = [t.data.copy() for _, t in named]
                best_log = log
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    if not select_best:
        best_epoch, best_snapshot, best_log = epochs - 1, None, logs[-1]
    return params, logs, (best_epoch, best_snapshot, best_log)


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridCell:
    overrides: dict
    config: RunConfig
    report: TrainReport
    params: ModelParams


def grid_search(
    manifest: DatasetManifest,
    splits: Splits,
    base_config: RunConfig,
    grid: list,
) -> tuple[GridCell, list]:
    """Train one model per override dict; rank by validation classification
    loss at the selected epoch (comparable across cells whose loss variants
    disagree on which auxiliary terms exist), ties broken by higher
    validation PR-AUC, then by grid order."""
    if not grid:
        raise ConfigError("grid search needs at least one cell")
    cells = []
    for overrides in grid:
        cfg = base_config.with_overrides(overrides)
        params, report = fit(manifest, splits.train, splits.valid, cfg)
        cells.append(GridCell(overrides=overrides, config=cfg,
                              report=report, params=params))
    ranked = sorted(
        range(len(cells)),
        key=lambda i: (cells[i].report.best_val_cls,
                       -cells[i].report.best_val_pr_auc,
                       i))
    return cells[ranked[0]], cells


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, config: RunConfig,
                    dims, rng_states: dict | None = None) -> str:
    named = list(params.named_tensors())
    header = {
        "format_version": 1,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "dims": list(dims),
        "tensors": [[name, list(t.shape)] for name, t in named],
        "rng_states": rng_states or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype=np.float64).tobytes())
    return checkpoint_hash(path)


def load_checkpoint(path) -> tuple[ModelParams, RunConfig, tuple, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataFormatError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        config = RunConfig.from_dict(header["config"])
        dims = tuple(header["dims"])
        params = init_model_params(config, dims)
        named = list(params.named_tensors())
        stored = header["tensors"]
        if [n for n, _ in named] != [n for n, _ in stored]:
            raise DataFormatError("checkpoint tensor names do not match "
                                  "the architecture built from its config")
        for (name, t), (_, shape) in zip(named, stored):
            if list(t.shape) != shape:
                raise DataFormatError(
                    f"checkpoint tensor {name}: shape {shape} vs {list(t.shape)}")
            buf = fh.read(t.data.size * 8)
            if len(buf) != t.data.size * 8:
                raise DataFormatError(f"checkpoint truncated at tensor {name}")
            t.data = np.frombuffer(buf, dtype=np.float64).reshape(t.shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("checkpoint has trailing bytes")
    return params, config, dims, header["rng_states"]


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
