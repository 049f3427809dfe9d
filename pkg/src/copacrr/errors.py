"""Exception types shared across the package.

The CLI maps these onto distinct exit codes: configuration problems,
data problems, and numerical failures are told apart by type.
"""


class ConfigError(Exception):
    """Invalid configuration: unknown keys, out-of-range values, shape/config mismatches."""


class DataError(Exception):
    """Malformed or missing input data (files, corpora, judgments)."""


class OovQueryError(DataError):
    """Every term of a query is out of vocabulary; context features cannot be built."""


class NumericalError(Exception):
    """A computation produced a non-finite result."""


class ShapeError(ValueError):
    """Tensor arguments disagree on a dimension; the message names it."""


class NonFiniteError(ValueError):
    """A tensor was constructed with NaN or Inf values while checking is enabled."""
