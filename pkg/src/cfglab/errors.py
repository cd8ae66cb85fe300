"""Exception types shared across the package.

The CLI maps these onto process exit codes: :class:`ConfigError` -> 2,
:class:`NumericError` -> 3, :class:`OSError` -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or argument range."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DegenerateInputError(NumericError):
    """Input makes a quantity undefined (e.g. zero standard deviation)."""


class OracleDegeneracyError(NumericError):
    """Importance weights collapsed below the requested effective sample size."""
