"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, malformed
or insufficient data exits 2, numerical failures exit 3.
"""


class MtaffectError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MtaffectError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(MtaffectError):
    """Invalid configuration value or combination."""


class DataError(MtaffectError):
    """Malformed input file: parse, join, or range failure."""


class LabelError(MtaffectError):
    """Label value outside its documented domain."""


class InsufficientDataError(MtaffectError):
    """Not enough valid samples for the requested operation."""


class NumericalError(MtaffectError):
    """Non-finite value showed up where a finite one is required."""


class CheckpointError(MtaffectError):
    """Checkpoint file inconsistent with the requested model."""
