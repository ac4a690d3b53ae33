"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class MarginMergeError(Exception):
    exit_code = 1


class InputError(MarginMergeError, ValueError):
    """Invalid configuration, empty inputs, duplicate ids."""

    exit_code = 2


class ShapeError(InputError):
    exit_code = 2


class DegenerateInputError(InputError):
    """Zero-norm feature, weight column or prototype."""

    exit_code = 5


class CorruptionError(MarginMergeError, IOError):
    """Bad magic, truncated payload or checksum mismatch on load."""

    exit_code = 3


class ProtocolError(MarginMergeError):
    """Sessions processed out of order, missing class statistics."""

    exit_code = 4


class NumericError(MarginMergeError, ArithmeticError):
    exit_code = 5
