"""Full GP binary classification with the Laplace approximation.

Newton iterations find the posterior mode of the latent values under the
logistic likelihood; hyperparameters maximize the Laplace evidence. The
evidence gradient is taken through one extra Newton step from the
(gradient-stopped) mode: at a fixed point the Newton map has zero Jacobian
in f, so differentiating that step yields exactly the implicit derivative
of the mode with respect to the hyperparameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
import scipy.optimize
from scipy.linalg import cho_solve

from . import sparse
from .data import Standardizer
from .errors import ConvergenceError, DataError, NonFiniteError
from .kernel import KernelParams, chol_psd, kernel_matrix
from .prediction import PredictionResult, logistic, logistic_gauss_probability

log = logging.getLogger(__name__)

LOG_BOUNDS = (-9.0, 9.0)


@dataclass(frozen=True)
class GpcConfig:
    lengthscale_init: float = 1.0
    signal_variance_init: float = 1.0
    nugget_init: float = 1e-2
    optimize: bool = True
    maxiter: int = 200
    newton_tol: float = 1e-6
    newton_maxiter: int = 100
    gh_nodes: int = 20


@dataclass(frozen=True)
class LaplaceGpcModel:
    X_train: np.ndarray
    y_train: np.ndarray
    params: KernelParams
    f_hat: np.ndarray
    W: np.ndarray
    chol_B: np.ndarray
    standardizer: Standardizer
    gh_nodes: int = 20
    log_evidence: float = float("nan")

    def predict(self, X):
        return predict_gpc(self, X)


def find_mode(K, y, f0=None, tol=1e-6, maxiter=100):
    """Posterior mode of the latent values for kernel matrix ``K``.

    Returns ``(f_hat, W, L_B, log_evidence)``. Converged when the gradient of
    the penalized log-likelihood has 2-norm at most ``tol``.
    """
    n = y.shape[0]
    f = np.zeros(n) if f0 is None else np.array(f0, dtype=float)
    a = np.linalg.lstsq(K, f, rcond=None)[0] if f0 is not None else np.zeros(n)

    def psi(f, a):
        return -0.5 * a @ f + np.sum(sparse.bernoulli_loglik(f, y))

    obj = psi(f, a)
    for _ in range(maxiter + 1):
        pi = logistic(f)
        g = y - pi
        if np.linalg.norm(g - a) <= tol:
            break
        W = pi * (1.0 - pi)
        sW = np.sqrt(W)
        L, _ = chol_psd(np.eye(n) + sW[:, None] * K * sW[None, :], role="Laplace B")
        b = W * f + g
        a_new = b - sW * cho_solve((L, True), sW * (K @ b))
        # damped Newton: halve the step until the objective does not decrease
        da = a_new - a
        for _ in range(30):
            a_try = a + da
            f_try = K @ a_try
            obj_try = psi(f_try, a_try)
            if obj_try >= obj - 1e-12 * abs(obj):
                break
            da = 0.5 * da
        a, f, obj = a_try, f_try, obj_try
    else:
        raise ConvergenceError(f"Newton did not converge in {maxiter} iterations "
                               f"(gradient norm {np.linalg.norm(g - a):.2e})")
    pi = logistic(f)
    W = pi * (1.0 - pi)
    sW = np.sqrt(W)
    L, _ = chol_psd(np.eye(n) + sW[:, None] * K * sW[None, :], role="Laplace B")
    evidence = psi(f, a) - np.sum(np.log(np.diag(L)))
    return f, W, L, float(evidence)


def _kernel_from_theta(theta, d):
    return KernelParams(np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1]))


def _evidence_one_step(theta, f_mode, Xs, y):
    """Laplace evidence after one Newton step from a fixed ``f_mode`` (traceable)."""
    d = Xs.shape[1]
    ls, sf2, nugget = jnp.exp(theta[:d]), jnp.exp(theta[d]), jnp.exp(theta[d + 1])
    n = Xs.shape[0]
    K = sparse.se_kernel(Xs, Xs, ls, sf2, jnp) + nugget * jnp.eye(n)
    f = jax.lax.stop_gradient(f_mode)
    pi = jax.nn.sigmoid(f)
    W = pi * (1.0 - pi)
    sW = jnp.sqrt(W)
    L = jnp.linalg.cholesky(jnp.eye(n) + sW[:, None] * K * sW[None, :])
    b = W * f + (y - pi)
    c = sparse.solve_tri(L, sW * (K @ b), jnp)
    a = b - sW * sparse.solve_tri(L, c, jnp, trans=True)
    f1 = K @ a
    pi1 = jax.nn.sigmoid(f1)
    sW1 = jnp.sqrt(pi1 * (1.0 - pi1))
    L1 = jnp.linalg.cholesky(jnp.eye(n) + sW1[:, None] * K * sW1[None, :])
    return (-0.5 * a @ f1 + jnp.sum(sparse.bernoulli_loglik(f1, y, jnp))
            - jnp.sum(jnp.log(jnp.diagonal(L1))))


def laplace_evidence(theta, Xs, y, cfg: GpcConfig, f0=None):
    """Laplace log evidence at log-hyperparameters ``theta`` with its gradient."""
    d = Xs.shape[1]
    K = kernel_matrix(Xs, None, _kernel_from_theta(theta, d))
    f, *_ = find_mode(K, y, f0, cfg.newton_tol, cfg.newton_maxiter)
    value, grad = _evidence_grad(jnp.asarray(theta), jnp.asarray(f), jnp.asarray(Xs), jnp.asarray(y))
    return float(value), np.asarray(grad), f


_evidence_grad = jax.jit(jax.value_and_grad(_evidence_one_step))


def fit_gpc_laplace(X, y, config: GpcConfig | None = None,
                    params: KernelParams | None = None) -> LaplaceGpcModel:
    """Fit the Laplace GP classifier to raw inputs and binary labels."""
    cfg = config or GpcConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise DataError("classification needs matching, non-empty X and y")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    if np.all(y == y[0]):
        log.warning("only one class in training labels; the prior will dominate")
    t = Standardizer.fit(X)
    Xs = t.transform_x(X)
    d = X.shape[1]
    if params is None:
        params = KernelParams(np.full(d, cfg.lengthscale_init), cfg.signal_variance_init,
                              cfg.nugget_init)
    theta0 = np.concatenate([np.log(params.lengthscales),
                             [math.log(params.signal_variance), math.log(params.noise_variance)]])
    if cfg.optimize:
        theta = _optimize(theta0, Xs, y, cfg)
        params = _kernel_from_theta(theta, d)
    K = kernel_matrix(Xs, None, params)
    f, W, L, ev = find_mode(K, y, None, cfg.newton_tol, cfg.newton_maxiter)
    return LaplaceGpcModel(X, y, params, f, W, L, t, cfg.gh_nodes, ev)


def _optimize(theta0, Xs, y, cfg):
    warm = {"f": None}
    history = []

    def fun(theta):
        v, g, f = laplace_evidence(theta, Xs, y, cfg, warm["f"])
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            raise NonFiniteError("Laplace evidence diverged", group="hyperparameters")
        # warm start from the previous mode only; never carry state across fits
        warm["f"] = f
        history.append(v)
        return -v, -g

    res = scipy.optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B",
                                  bounds=[LOG_BOUNDS] * theta0.size,
                                  options={"maxiter": cfg.maxiter})
    return res.x if -res.fun >= history[0] else theta0


def latent_predictive(model: LaplaceGpcModel, X):
    """Gaussian approximation of p(f* | y) at raw query inputs: (mean, var)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite query")
    p = model.params
    Xs = model.standardizer.transform_x(X)
    Ks = kernel_matrix(Xs, model.standardizer.transform_x(model.X_train), p)
    grad = model.y_train - logistic(model.f_hat)
    mean = Ks @ grad
    v = sparse.solve_tri(model.chol_B, np.sqrt(model.W)[:, None] * Ks.T)
    var = np.maximum(p.signal_variance + p.noise_variance - np.sum(v * v, axis=0), 0.0)
    return mean, var


def predict_gpc(model: LaplaceGpcModel, X) -> PredictionResult:
    mean, var = latent_predictive(model, X)
    return PredictionResult(mean, var, logistic_gauss_probability(mean, var, model.gh_nodes))
