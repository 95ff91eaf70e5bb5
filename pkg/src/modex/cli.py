"""Batch command-line entry points.

Commands: synth, train, eval, ablate, stats. Every run that produces files
also writes the exact resolved config next to them. Exit codes: 0 success,
1 runtime failure (bad data content, divergence, undefined metrics),
2 usage/config errors.
"""

from __future__ import annotations

import dataclasses
import datetime
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import RunConfig
from .data import load_dataset, save_dataset, synthesize, temporal_split
from .errors import ConfigError, ModexError
from .experts import MODES
from .metrics import bootstrap_eval
from .model import forward
from .training import (
    checkpoint_hash,
    fit,
    grid_search,
    load_checkpoint,
    save_checkpoint,
)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(2)
        except ModexError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
    return wrapper


def _parse_overrides(items, flag="--set") -> dict:
    overrides = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"{flag} expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _build_config(config_path, sets) -> RunConfig:
    cfg = RunConfig.from_file(config_path) if config_path else RunConfig()
    return cfg.with_overrides(_parse_overrides(sets))


def _split_dataset(records, cfg):
    raw = cfg.split_date
    if not raw:
        # fall back to a date beyond every record: empty test partition
        raw = "9999-12-31"
    try:
        split_date = datetime.date.fromisoformat(raw)
    except ValueError as exc:
        raise ConfigError(f"split_date is not an ISO date: {raw!r}") from exc
    return temporal_split(records, split_date, cfg.validation_fraction, cfg.seed)


def _check_dims(manifest, dims):
    got = (manifest.d_mol, manifest.d_dis, manifest.d_txt)
    if got != tuple(dims):
        raise ConfigError(
            f"dataset dims {got} do not match checkpoint dims {tuple(dims)}")


def _score_records(params, records, manifest, cfg):
    from .data import pad_and_mask
    caps = (cfg.mol_cap, cfg.dis_cap, cfg.inc_cap, cfg.exc_cap)
    padded = pad_and_mask(records, manifest, caps, cfg.aggregation)
    selection_rng = None
    if cfg.token_selection == "random":
        from .training import SELECTION_STREAM
        selection_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, SELECTION_STREAM]))
    preds = np.zeros(len(records))
    batch = cfg.batch_size
    from .training import _slice_batch
    for start in range(0, len(records), batch):
        idx = np.arange(start, min(start + batch, len(records)))
        out = forward(params, _slice_batch(padded, idx), cfg,
                      selection_rng=selection_rng)
        preds[idx] = out.probabilities.data
    return preds, padded


@click.group()
def main():
    """Trial-outcome model: data synthesis, training, evaluation, ablation."""


@main.command()
@click.option("--n", type=int, required=True, help="number of records")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--separability", type=float, default=1.0, show_default=True,
              help="0 = pure noise labels, 1 = linearly recoverable labels")
@click.option("--d-mol", type=int, default=32, show_default=True)
@click.option("--d-dis", type=int, default=16, show_default=True)
@click.option("--d-txt", type=int, default=64, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_handle_errors
def synth(n, seed, separability, d_mol, d_dis, d_txt, out):
    """Write a synthetic embedding dataset."""
    manifest, records = synthesize(n, seed=seed, separability=separability,
                                   d_mol=d_mol, d_dis=d_dis, d_txt=d_txt)
    save_dataset(out, manifest, records)
    click.echo(f"wrote {len(records)} records to {out}")


@main.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
              help="override a config field (repeatable; highest precedence)")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@_handle_errors
def train(data, config_path, sets, out_dir):
    """Temporal-split the dataset, fit, write checkpoint + report."""
    cfg = _build_config(config_path, sets).resolved()
    manifest, records = load_dataset(data)
    splits = _split_dataset(records, cfg)
    params, report = fit(manifest, splits.train, splits.valid, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.yaml")
    dims = (manifest.d_mol, manifest.d_dis, manifest.d_txt)
    ckpt = out / "checkpoint.bin"
    digest = save_checkpoint(ckpt, params, cfg, dims)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(report), fh, indent=2, sort_keys=True)
    click.echo(f"trained {len(splits.train)} train / {len(splits.valid)} valid"
               f" / {len(splits.test)} test records")
    click.echo(f"best epoch {report.best_epoch}"
               f" validation loss {report.best_val_total:.6f}")
    click.echo(f"checkpoint sha256 {digest}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
              help="override evaluation fields (reps, fraction, threshold, seed)")
@click.option("--out-dir", type=click.Path(file_okay=False))
@_handle_errors
def eval_cmd(checkpoint, data, sets, out_dir):
    """Bootstrap-evaluate a checkpoint on every record in a dataset file."""
    params, cfg, dims, _ = load_checkpoint(checkpoint)
    cfg = cfg.with_overrides(_parse_overrides(sets))
    manifest, records = load_dataset(data)
    _check_dims(manifest, dims)
    preds, padded = _score_records(params, records, manifest, cfg)
    report = bootstrap_eval(
        preds, padded.labels,
        reps=cfg.bootstrap_reps, fraction=cfg.bootstrap_fraction,
        seed=cfg.seed, threshold=cfg.eval_threshold,
        with_replacement=cfg.bootstrap_replacement)
    click.echo(f"{'metric':<10}{'mean':>10}{'std':>10}")
    for name, mean, std in report.rows():
        click.echo(f"{name:<10}{mean:>10.4f}{std:>10.4f}")
    click.echo(f"replicates {report.reps} fraction {report.fraction}"
               f" seed {report.seed}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / "config.yaml")
        with open(out / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(report), fh, indent=2, sort_keys=True)


@main.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE")
@click.option("--cell", "cells", multiple=True, required=True, metavar="K=V[,K=V...]",
              help="one grid cell as comma-separated overrides (repeatable)")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@_handle_errors
def ablate(data, config_path, sets, cells, out_dir):
    """Train every config delta and rank by validation classification loss."""
    base = _build_config(config_path, sets)
    grid = [_parse_overrides(cell.split(","), flag="--cell") for cell in cells]
    manifest, records = load_dataset(data)
    splits = _split_dataset(records, base.resolved())
    best, all_cells = grid_search(manifest, splits, base, grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base.resolved().write(out / "config.yaml")
    table = []
    click.echo(f"{'cell':<40}{'val_cls':>10}{'val_pr':>9}{'val_roc':>9}{'epoch':>7}")
    for cell in all_cells:
        name = ",".join(f"{k}={v}" for k, v in cell.overrides.items())
        r = cell.report
        click.echo(f"{name:<40}{r.best_val_cls:>10.4f}{r.best_val_pr_auc:>9.4f}"
                   f"{r.best_val_roc_auc:>9.4f}{r.best_epoch:>7}")
        table.append({"overrides": cell.overrides,
                      "val_cls": r.best_val_cls,
                      "val_pr_auc": r.best_val_pr_auc,
                      "val_roc_auc": r.best_val_roc_auc,
                      "best_epoch": r.best_epoch})
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    dims = (manifest.d_mol, manifest.d_dis, manifest.d_txt)
    digest = save_checkpoint(out / "best.bin", best.params, best.config.resolved(), dims)
    winner = ",".join(f"{k}={v}" for k, v in best.overrides.items())
    click.echo(f"winner: {winner}")
    click.echo(f"checkpoint sha256 {digest}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@_handle_errors
def stats(checkpoint, data):
    """Token-selection frequency table for a trained model on a dataset."""
    from .experts import token_usage_stats

    params, cfg, dims, _ = load_checkpoint(checkpoint)
    manifest, records = load_dataset(data)
    _check_dims(manifest, dims)
    from .data import pad_and_mask
    caps = (cfg.mol_cap, cfg.dis_cap, cfg.inc_cap, cfg.exc_cap)
    padded = pad_and_mask(records, manifest, caps, cfg.aggregation)
    selection_rng = None
    if cfg.token_selection == "random":
        from .training import SELECTION_STREAM
        selection_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, SELECTION_STREAM]))
    hard = {m: [] for m in MODES}
    valid = {m: [] for m in MODES}
    from .training import _slice_batch
    for start in range(0, len(records), cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, len(records)))
        out = forward(params, _slice_batch(padded, idx), cfg,
                      selection_rng=selection_rng)
        for m in MODES:
            hard[m].append(out.selections[m].hard_mask)
            valid[m].append(out.valid[m])
    rows = token_usage_stats(
        {m: np.concatenate(hard[m]) for m in MODES},
        {m: np.concatenate(valid[m]) for m in MODES})
    click.echo(f"{'mode':<6}{'group':>6}{'index':>6}{'trials':>8}"
               f"{'ratio':>8}  always_selected")
    for r in rows:
        click.echo(f"{r.mode:<6}{r.group:>6}{r.index:>6}{r.trials:>8}"
                   f"{r.ratio:>8.3f}  {'yes' if r.always_selected else 'no'}")


if __name__ == "__main__":
    main()
