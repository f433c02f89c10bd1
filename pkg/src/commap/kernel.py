"""ARD squared-exponential kernel and positive-definite factorization helpers.

The kernel is

    k(x, x') = sf2 * exp(-0.5 * sum_i (x_i - x'_i)^2 / l_i^2) + s02 * [x is x']

where the nugget ``s02`` is applied by *index identity*: it lands on the
diagonal of a matrix built from one array against itself, never on a
cross-covariance between two arrays that happen to share coordinates.

Every array function takes an ``xp`` argument so the same code serves the
numpy prediction paths and the traced ``jax.numpy`` objectives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, SingularMatrixError

log = logging.getLogger(__name__)

#: Fixed diagonal jitter added to inducing-point covariances inside objectives.
JITTER = 1e-6


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the ARD squared-exponential kernel."""

    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        if ls.ndim != 1 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ConfigError(f"lengthscales must be finite and positive, got {ls}")
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ConfigError("signal_variance must be finite and positive")
        if not (np.isfinite(self.noise_variance) and self.noise_variance >= 0):
            raise ConfigError("noise_variance must be finite and non-negative")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    @classmethod
    def default(cls, dim=4, noise_variance=0.0):
        return cls(np.ones(dim), 1.0, noise_variance)

    def to_dict(self):
        return {
            "lengthscales": self.lengthscales.tolist(),
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["lengthscales"]), d["signal_variance"], d["noise_variance"])


def se_kernel(X, Z, lengthscales, signal_variance, xp=np):
    """Noise-free ARD squared-exponential cross-covariance, shape (N, M)."""
    diff = X[:, None, :] / lengthscales - Z[None, :, :] / lengthscales
    return signal_variance * xp.exp(-0.5 * xp.sum(diff * diff, axis=-1))


def _check_points(X, dim, name):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise DataError(f"{name} must have {dim} columns, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{name} contains non-finite values")
    return X


def kernel_eval(x, x2, p: KernelParams) -> float:
    """Kernel value between two single points.

    The nugget is added when the two coordinate vectors are equal.
    """
    x = _check_points(x, p.dim, "x")[0]
    x2 = _check_points(x2, p.dim, "x2")[0]
    value = se_kernel(x[None], x2[None], p.lengthscales, p.signal_variance)[0, 0]
    if np.array_equal(x, x2):
        value += p.noise_variance
    return float(value)


def kernel_matrix(X, Z=None, p: KernelParams = None) -> np.ndarray:
    """Kernel matrix between the rows of ``X`` and ``Z``.

    Passing ``Z=None`` (or the very same array object) builds the symmetric
    matrix of ``X`` against itself, with the nugget on the diagonal.
    """
    if p is None:
        raise ConfigError("kernel_matrix needs KernelParams")
    same = Z is None or Z is X
    X = _check_points(X, p.dim, "X")
    if same:
        K = se_kernel(X, X, p.lengthscales, p.signal_variance)
        K = 0.5 * (K + K.T)
        K[np.diag_indices_from(K)] += p.noise_variance
        return K
    Z = _check_points(Z, p.dim, "Z")
    return se_kernel(X, Z, p.lengthscales, p.signal_variance)


class CholResult(NamedTuple):
    L: np.ndarray
    jitter: float


def chol_psd(A, jitter_start=1e-10, role="matrix") -> CholResult:
    """Lower Cholesky factor of ``A + j*I`` for the smallest working jitter.

    Tries ``j = 0`` and then ``jitter_start * 10**k`` for ``k = 0..8``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DataError(f"{role}: expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DataError(f"{role}: matrix has non-finite entries")
    eye = np.eye(A.shape[0])
    jitters = [0.0] + [jitter_start * 10.0**k for k in range(9)]
    for j in jitters:
        try:
            L = np.linalg.cholesky(A + j * eye)
        except np.linalg.LinAlgError:
            continue
        if j > 0:
            log.debug("%s: applied jitter %.1e", role, j)
        return CholResult(L, j)
    raise SingularMatrixError(role, jitters[-1])
