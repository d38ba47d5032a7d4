"""Federated clustering of cells for probabilistic QoS prediction."""
from ._backend import BACKEND, available_backends
from .errors import (
    ConfigError, DivergenceError, InsufficientDataError, InvariantError, IterationLimitError,
    NumericalDomainError, QosClustError, RoundIncompleteError,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "available_backends", "ConfigError", "DivergenceError", "InsufficientDataError",
    "InvariantError", "IterationLimitError", "NumericalDomainError", "QosClustError",
    "RoundIncompleteError", "__version__",
]
