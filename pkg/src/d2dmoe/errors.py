"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes (see cli.py): validation problems exit
with 2, numeric failures with 3, malformed files with 4.
"""


class D2DMoeError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(D2DMoeError):
    """Invalid configuration, arguments, or caller-supplied data."""


class DimensionError(ValidationError):
    """Tensor shapes or dtypes do not conform to an operation's rule."""


class InputError(ValidationError):
    """Input data violates an operation's documented precondition."""


class ContractError(ValidationError):
    """An API was called in a state its contract forbids."""


class NumericError(D2DMoeError):
    """Non-finite values or divergence detected during computation."""


class FormatError(D2DMoeError):
    """Malformed or corrupted checkpoint / dataset file content."""
