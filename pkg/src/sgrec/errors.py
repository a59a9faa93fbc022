"""Exception hierarchy shared by every sgrec module.

The CLI maps these onto process exit codes, so each class carries the code
it should surface as.
"""


class SGRecError(Exception):
    exit_code = 1


class ShapeError(SGRecError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class StateError(SGRecError, RuntimeError):
    """An object is not in the state an operation requires."""


class DataFormatError(SGRecError, ValueError):
    exit_code = 2


class DataIntegrityError(SGRecError, ValueError):
    exit_code = 2


class EmptyDataError(SGRecError, ValueError):
    exit_code = 3


class NumericError(SGRecError, FloatingPointError):
    exit_code = 4


class CompatibilityError(SGRecError):
    """Checkpoint version or vocabulary fingerprint does not match."""

    exit_code = 5


class IntegrityError(SGRecError):
    """A serialized file is truncated or corrupted."""

    exit_code = 5
