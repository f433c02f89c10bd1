"""Gaussian-process communication maps for pairs of underwater vehicles.

Exact and sparse variational GP regression on SNR, Laplace and sparse
variational GP classification of packet success, and a noisy-input variant
that amortizes inference over uncertain vehicle positions.
"""

from .errors import (
    CommapError, ConfigError, ConvergenceError, DataError, NonFiniteError, NumericalError,
    SchemaError, SingularMatrixError,
)
from .kernel import KernelParams, chol_psd, kernel_eval, kernel_matrix

__version__ = "0.1.0"
