"""Sparse variational GP machinery shared by SVGPR, SVGPC and the noisy-input model.

Functions are written against an array namespace ``xp`` (``numpy`` or
``jax.numpy``) so the traced objectives and the numpy prediction paths run the
same arithmetic.
"""

from __future__ import annotations

import math

import jax.scipy.linalg as jsl
import numpy as np
import scipy.linalg as sl

from .kernel import se_kernel
from .optim import softplus

LOG_2PI = math.log(2.0 * math.pi)


def solve_tri(L, B, xp=np, trans=False):
    """Solve ``L x = B`` (or ``L^T x = B``) for lower-triangular ``L``."""
    if xp is np:
        return sl.solve_triangular(L, B, lower=True, trans=1 if trans else 0)
    return jsl.solve_triangular(L, B, lower=True, trans=1 if trans else 0)


def lower_factor(raw, xp=np):
    """Lower-triangular factor with softplus-positive diagonal from an unconstrained square."""
    diag = xp.diagonal(raw)
    return xp.tril(raw, -1) + xp.diag(softplus(diag, xp))


def kzz_chol(Z, lengthscales, signal_variance, nugget, jitter, xp=np):
    """Cholesky factor of K(Z, Z) + (nugget + jitter) I inside a traced objective."""
    K = se_kernel(Z, Z, lengthscales, signal_variance, xp)
    K = K + (nugget + jitter) * xp.eye(Z.shape[0])
    return xp.linalg.cholesky(K)


def moments(X, Z, Lz, mu_s, S_chol, lengthscales, signal_variance, nugget, xp=np):
    """Marginal mean and variance of q(f(x)) for each row of ``X``.

    mean = K_xZ K_ZZ^-1 mu_s
    var  = k(x,x) - K_xZ K_ZZ^-1 K_Zx + K_xZ K_ZZ^-1 S K_ZZ^-1 K_Zx
    with ``S = S_chol S_chol^T`` and ``Lz`` the factor of K_ZZ.
    """
    Kzx = se_kernel(Z, X, lengthscales, signal_variance, xp)
    A = solve_tri(Lz, Kzx, xp)
    mean = A.T @ solve_tri(Lz, mu_s, xp)
    B = solve_tri(Lz, A, xp, trans=True)
    SB = S_chol.T @ B
    var = signal_variance + nugget - xp.sum(A * A, axis=0) + xp.sum(SB * SB, axis=0)
    return mean, var


def kl_q_p(mu_s, S_chol, Lz, xp=np):
    """KL( N(mu_s, S) || N(0, K_ZZ) ) with both covariances given by Cholesky factors."""
    M = mu_s.shape[0]
    a = solve_tri(Lz, mu_s, xp)
    W = solve_tri(Lz, S_chol, xp)
    logdet_k = 2.0 * xp.sum(xp.log(xp.diagonal(Lz)))
    logdet_s = 2.0 * xp.sum(xp.log(xp.abs(xp.diagonal(S_chol))))
    return 0.5 * (xp.sum(W * W) + xp.sum(a * a) - M + logdet_k - logdet_s)


def bernoulli_loglik(f, y, xp=np):
    """log p(y | f) under the logistic link, stable for large |f|."""
    return -softplus(-(2.0 * y - 1.0) * f, xp)


def expected_bernoulli(mean, var, y, nodes, weights, xp=np):
    """Gauss-Hermite estimate of E[log p(y | f)] for f ~ N(mean, var), elementwise."""
    sd = xp.sqrt(xp.maximum(var, 1e-300))
    f = mean[..., None] + math.sqrt(2.0) * sd[..., None] * nodes
    ll = bernoulli_loglik(f, y[..., None], xp)
    return ll @ weights / math.sqrt(math.pi)


def expected_gaussian(mean, var, y, noise, xp=np):
    """Closed-form E[log N(y | f, noise)] for f ~ N(mean, var)."""
    return -0.5 * (LOG_2PI + xp.log(noise)) - 0.5 * ((y - mean) ** 2 + var) / noise

