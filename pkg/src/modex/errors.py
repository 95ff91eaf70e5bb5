"""Shared exception taxonomy.

Every error the library raises deliberately derives from ModexError so the
CLI can map library failures to exit code 1 and argument problems to 2.
"""


class ModexError(Exception):
    """Base class for all deliberate modex errors."""


class ShapeError(ModexError):
    """Operand shapes incompatible; message names both shapes."""


class DegenerateMaskError(ModexError):
    """A mask leaves an operation with nothing to act on (e.g. a fully
    masked softmax row or an empty destination mode in cross-attention)."""


class DegenerateTrialError(ModexError):
    """A trial has no valid token in any mode; prediction is undefined."""


class NumericError(ModexError):
    """A non-finite value appeared where finiteness is required."""


class ConfigError(ModexError):
    """Invalid, unknown, or inconsistent configuration."""


class DataFormatError(ModexError):
    """Dataset file violates the on-disk contract; message carries the
    offending line number and, where known, the record id."""


class TrainingDivergedError(ModexError):
    """Loss or a gradient became non-finite during fitting."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class MetricUndefinedError(ModexError):
    """A metric is undefined for the given labels (e.g. single-class
    ROC-AUC), including after a bootstrap resample retry."""
