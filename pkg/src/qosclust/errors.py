"""Exception types shared across the package."""


class QosClustError(Exception):
    """Base class for package errors."""


class NumericalDomainError(QosClustError, ArithmeticError):
    """A numerical precondition failed (singular matrix, overflow, non-PD covariance)."""


class InvariantError(QosClustError, ValueError):
    """An input violated a documented structural invariant."""


class InsufficientDataError(QosClustError, ValueError):
    """Too few samples to produce the requested estimate."""


class IterationLimitError(QosClustError, RuntimeError):
    """An iterative routine hit its iteration cap without converging."""


class DivergenceError(QosClustError, FloatingPointError):
    """Training or optimisation produced non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class RoundIncompleteError(QosClustError, RuntimeError):
    """A federated round did not receive every expected node message."""


class ConfigError(QosClustError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
