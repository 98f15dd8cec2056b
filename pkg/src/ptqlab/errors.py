"""Exception hierarchy shared across the package."""


class PtqLabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PtqLabError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(PtqLabError):
    """A configuration value or argument is outside its allowed range."""


class NumericError(PtqLabError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class NotPositiveDefiniteError(NumericError):
    """Cholesky factorization hit a non-positive pivot.

    Callers are expected to add diagonal damping and retry.
    """


class ContractError(PtqLabError):
    """An API precondition was violated (wrong mode, empty mask, ...)."""


class CoverageError(PtqLabError):
    """A quantization plan does not cover the checkpoint it is applied to."""

    def __init__(self, message: str, missing=(), unknown=()):
        super().__init__(message)
        self.missing = tuple(missing)
        self.unknown = tuple(unknown)


class DivergenceError(PtqLabError):
    """Training loss became non-finite; carries the last finite checkpoint."""

    def __init__(self, message: str, last_good=None, step: int = -1):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
