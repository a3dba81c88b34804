"""Exception hierarchy shared by every tipformer module.

Each class carries the CLI exit code it maps to, so command handlers can
translate any failure without a lookup table.
"""


class TipFormerError(Exception):
    exit_code = 1


class UsageError(TipFormerError):
    """Bad arguments, bad call order, or violated preconditions."""

    exit_code = 1


class ConfigError(UsageError):
    """Invalid model/training configuration."""


class DimensionError(UsageError):
    """Tensor shapes that do not fit together."""


class DataError(TipFormerError):
    """Malformed or inconsistent corpus data."""

    exit_code = 2


class FormatError(DataError):
    """Binary file (TPFE/TPFC) that cannot be decoded."""


class NumericError(TipFormerError):
    """Non-finite values appeared during training or inference."""

    exit_code = 3
