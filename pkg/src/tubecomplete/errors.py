"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes: ConfigError -> 2, IOError-ish
failures -> 3, DataError -> 4, NumericError -> 5.
"""


class TubeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TubeError):
    """Invalid argument, configuration value, or schema violation."""


class FormatError(TubeError):
    """A file exists but its content does not match the expected format."""


class DataError(TubeError):
    """Input data cannot be processed (empty required subset, unmatched ids, ...)."""


class FractureError(DataError):
    """Fracture simulation exhausted its retry budget.

    `group` identifies which removal group could not be placed.
    """

    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group


class NumericError(TubeError):
    """Numerical failure during optimization (NaN/Inf loss)."""


class ShapeMismatch(ConfigError):
    """Tensor operation received incompatible shapes."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {tuple(shapes)}")
        self.op = op
        self.shapes = shapes
