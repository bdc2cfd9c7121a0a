"""Exception taxonomy shared across the package.

ConfigError maps to CLI exit code 2, NumericalError to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid configuration or ill-shaped input."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or violated a numerical precondition."""


class IndefiniteOperatorError(NumericalError):
    """CG encountered a search-direction curvature that is negative beyond round-off."""


class SamplerDivergedError(NumericalError):
    """A sampling run produced non-finite values; carries the trace up to the failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
