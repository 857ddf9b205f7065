"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class NilmpruneError(Exception):
    """Base class for all package errors."""


class ConfigError(NilmpruneError):
    """Invalid configuration, CLI usage, or violated operation precondition."""


class ShapeError(ConfigError):
    """Tensor/layer dimension mismatch; message names the offending axis."""


class DataError(NilmpruneError):
    """Malformed or missing input data (CSV schema, model file format)."""


class NumericError(NilmpruneError):
    """Numeric failure during training or evaluation (NaN loss, zero MACs)."""


class DependencyError(NilmpruneError):
    """Structured removal sets violate the model's dependency groups."""
