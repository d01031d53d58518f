"""Exception hierarchy.

Each class carries a short ``code`` used in CLI diagnostics and JSON output.
"""


class PodeError(Exception):
    code = "E_PODE"


class ConfigError(PodeError, ValueError):
    code = "E_CONFIG"


class InvalidPriorError(ConfigError):
    code = "E_PRIOR"


class GridError(ConfigError):
    """An observation time does not fall on the solver grid."""

    code = "E_GRID"


class UnsupportedError(ConfigError):
    code = "E_UNSUPPORTED"


class NumericalError(PodeError, ArithmeticError):
    code = "E_NUMERIC"


class SingularMatrixError(NumericalError):
    code = "E_SINGULAR"


class DivergedError(NumericalError):
    """Non-finite values appeared while stepping the solver."""

    code = "E_DIVERGED"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class HessianError(NumericalError):
    code = "E_HESS"


class NonFiniteError(NumericalError):
    code = "E_NONFINITE"


class NoConvergenceError(PodeError):
    """Optimizer stopped before meeting its tolerance; ``result`` holds the best point."""

    code = "E_NOCONVERGE"

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
