"""Exception hierarchy shared by all modules.

The CLI maps each family to its own exit status, so raise the most specific
class available.
"""


class CommapError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CommapError, ValueError):
    """Invalid run configuration or argument."""


class DataError(CommapError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    """A row violates the event-log schema invariants."""


class NumericalError(CommapError, ArithmeticError):
    """Numerical failure during fitting or prediction."""


class SingularMatrixError(NumericalError):
    def __init__(self, role, max_jitter):
        super().__init__(
            f"{role}: Cholesky factorization failed even with jitter {max_jitter:.1e}"
        )
        self.role = role
        self.max_jitter = max_jitter


class NonFiniteError(NumericalError):
    """A non-finite value appeared; ``group`` names the parameter group if known."""

    def __init__(self, message, group=None, state=None):
        if group is not None:
            message = f"{message} (parameter group {group!r})"
        super().__init__(message)
        self.group = group
        self.state = state


class ConvergenceError(NumericalError):
    pass
