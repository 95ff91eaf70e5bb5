"""Run configuration: a single flat dataclass plus file/override resolution.

Precedence when building a config: dataclass defaults < config file values <
explicit CLI overrides. Unknown keys are rejected rather than ignored so a
typo in a config file cannot silently fall back to a default.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import yaml

from .errors import ConfigError

AGGREGATIONS = ("first_token", "mean", "sum")
TOKEN_SELECTIONS = ("learned", "all", "random")
LOSS_VARIANTS = ("full", "bce_only", "bce_cauchy", "bce_contrastive")
INDICATOR_DIRECTIONS = ("keep_high", "keep_low")
SELECTION_GRADIENTS = ("straight_through", "blocked")
CONTRASTIVE_DENOMINATORS = ("global", "per_anchor")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    # Per-mode sequence caps. Note the fused interaction sequence is twice
    # their total, because every mode issues queries toward the other two:
    # with the defaults that is 2 * (5 + 5 + 8 + 5) = 46 rows.
    mol_cap: int = 5
    dis_cap: int = 5
    inc_cap: int = 8
    exc_cap: int = 5

    # Encoder geometry: model width d_k, attention heads per layer (head dim
    # is d_k // heads), encoder layers per stack, feed-forward width.
    d_k: int = 32
    heads: int = 2
    layers: int = 2
    ffn_dim: int = 32

    # Criteria statement aggregation and positional information.
    aggregation: str = "first_token"
    use_pe: bool = True

    # Token selection. straight_through lets dropped tokens keep receiving
    # confidence gradient, so the sparsity pressure cannot permanently
    # silence a token the prediction loss still wants.
    token_selection: str = "learned"
    select_threshold: float = 0.5
    indicator_direction: str = "keep_high"
    selection_gradient: str = "straight_through"

    # Loss composition. A non-"full" loss_variant zeroes the corresponding
    # lambda(s) at resolution time; the variant name is kept for the record.
    loss_variant: str = "full"
    lambda_cauchy: float = 0.05
    lambda_contrastive: float = 0.04
    cauchy_scale: float = 0.1
    temperature: float = 0.5
    contrastive_denominator: str = "global"
    swap_class_weights: bool = False

    # Optimization. Adam moves each coordinate by up to lr per step, so lr
    # above ~1e-3 swamps the weight scale and training never settles.
    lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 100
    patience: int = 10
    clip_norm: float = 5.0  # 0 disables clipping
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    retrain_on_combined: bool = False

    # Splitting and evaluation.
    validation_fraction: float = 0.15
    split_date: str = ""  # ISO date; required by the train command
    bootstrap_reps: int = 10
    bootstrap_fraction: float = 0.8
    bootstrap_replacement: bool = False
    eval_threshold: float = 0.5

    # ------------------------------------------------------------------
    def validate(self) -> None:
        def _enum(name: str, value: str, allowed: tuple[str, ...]) -> None:
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")

        _enum("aggregation", self.aggregation, AGGREGATIONS)
        _enum("token_selection", self.token_selection, TOKEN_SELECTIONS)
        _enum("loss_variant", self.loss_variant, LOSS_VARIANTS)
        _enum("indicator_direction", self.indicator_direction, INDICATOR_DIRECTIONS)
        _enum("selection_gradient", self.selection_gradient, SELECTION_GRADIENTS)
        _enum(
            "contrastive_denominator",
            self.contrastive_denominator,
            CONTRASTIVE_DENOMINATORS,
        )
        for name in ("mol_cap", "dis_cap", "inc_cap", "exc_cap", "d_k", "heads",
                     "layers", "ffn_dim", "batch_size", "epochs", "bootstrap_reps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_k % self.heads != 0:
            raise ConfigError(f"d_k={self.d_k} not divisible by heads={self.heads}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0 (0 freezes parameters)")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")
        if not 0.0 <= self.select_threshold <= 1.0:
            raise ConfigError("select_threshold must lie in [0, 1]")
        if self.cauchy_scale <= 0 or self.temperature <= 0:
            raise ConfigError("cauchy_scale and temperature must be positive")
        if self.lambda_cauchy < 0 or self.lambda_contrastive < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ConfigError("bootstrap_fraction must lie in (0, 1]")
        if not 0.0 < self.eval_threshold < 1.0:
            raise ConfigError("eval_threshold must lie in (0, 1)")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.split_date:
            try:
                datetime.date.fromisoformat(self.split_date)
            except ValueError as exc:
                raise ConfigError(f"split_date is not an ISO date: {self.split_date!r}") from exc

    def resolved(self) -> "RunConfig":
        """Validate and apply the loss variant to the lambda weights."""
        self.validate()
        out = self
        if self.loss_variant == "bce_only":
            out = replace(out, lambda_cauchy=0.0, lambda_contrastive=0.0)
        elif self.loss_variant == "bce_cauchy":
            out = replace(out, lambda_contrastive=0.0)
        elif self.loss_variant == "bce_contrastive":
            out = replace(out, lambda_cauchy=0.0)
        return out

    # ------------------------------------------------------------------
    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        if not isinstance(values, dict):
            raise ConfigError(f"config must be a mapping, got {type(values).__name__}")
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            coerced[f.name] = _coerce(f.name, values[f.name], type(getattr(cls(), f.name)))
        return cls(**coerced)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if raw is None:
            raw = {}
        return cls.from_dict(raw)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply CLI-style overrides; string values are parsed to the field type."""
        if not overrides:
            return self
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        parsed = {
            k: _coerce(k, v, type(getattr(self, k)), from_string=isinstance(v, str))
            for k, v in overrides.items()
        }
        return replace(self, **parsed)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _coerce(name: str, value, target: type, from_string: bool = False):
    if target is bool:
        if isinstance(value, bool):
            return value
        if from_string and isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
        raise ConfigError(f"{name} expects a boolean, got {value!r}")
    if target is int:
        if isinstance(value, bool):
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if from_string and isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{name} expects an integer, got {value!r}")
    if target is float:
        if isinstance(value, bool):
            raise ConfigError(f"{name} expects a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if from_string and isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{name} expects a number, got {value!r}")
    if target is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{name} expects a string, got {value!r}")
    raise ConfigError(f"unsupported config field type for {name}")
