"""Exception hierarchy.

Every error carries a short machine-readable ``category`` so the CLI can
report it alongside the human message.
"""


class OssaError(Exception):
    category = "error"


class DimError(OssaError, ValueError):
    category = "dim"


class NumericError(OssaError, ArithmeticError):
    category = "numeric"


class EmptyClassError(OssaError, ValueError):
    category = "empty_class"


class EmptyDatasetError(OssaError, ValueError):
    category = "empty_dataset"


class EmptySetError(OssaError, ValueError):
    category = "empty_set"


class LabelError(OssaError, ValueError):
    category = "label"


class StateError(OssaError, RuntimeError):
    category = "state"


class CheckpointError(OssaError, ValueError):
    category = "checkpoint"


class InsufficientClassError(OssaError, ValueError):
    category = "insufficient_class"


class CurveError(OssaError, ValueError):
    category = "curve"


class ParamError(OssaError, ValueError):
    category = "param"


class SizeError(OssaError, ValueError):
    category = "size"


class ProfileError(OssaError, ValueError):
    category = "profile"


class FormatError(OssaError, ValueError):
    """Malformed feature or references file."""

    category = "format"


class ConfigError(OssaError, ValueError):
    category = "config"

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class IoError(OssaError, OSError):
    category = "io"
