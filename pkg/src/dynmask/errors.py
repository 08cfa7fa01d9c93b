"""Exception types raised by the public ops.

Every contract violation maps to one of these instead of a bare
ValueError so callers (and the verify CLI) can tell input bugs apart
from numerical trouble.
"""


class DynmaskError(Exception):
    """Base class for all package errors."""


class ConfigError(DynmaskError):
    """A config dataclass failed validation."""


class DimensionError(DynmaskError):
    """Operand shapes or dtypes are incompatible with the op."""


class DegenerateRowError(DynmaskError):
    """A softmax row had no finite entry left to normalize."""


class MaskScoreOverflowError(DynmaskError):
    """Mask-score exponent grew past the f64 overflow guard."""


class MaskConsistencyError(DynmaskError):
    """A mask failed its structural invariants (counts, causality, block map)."""


class CapacityError(DynmaskError):
    """A task spec does not fit (too many pairs/queries for the sequence or vocab)."""


class TrainingDivergedError(DynmaskError):
    """Loss became non-finite during training."""


class CheckpointFormatError(DynmaskError):
    """Checkpoint file is malformed or inconsistent with its header."""
