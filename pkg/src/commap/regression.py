"""GP regression on SNR of successful events: exact (GPR) and sparse variational (SVGPR).

Targets are standardized, so the zero prior mean corresponds to the mean
training SNR. For exact GPR the kernel nugget plays the role of the Gaussian
observation noise; predictive variances are for the noise-free SNR surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
import scipy.optimize
from scipy.linalg import cho_solve

from . import sparse
from .data import Standardizer
from .errors import DataError, NonFiniteError, NumericalError
from .kernel import KernelParams, chol_psd, kernel_matrix
from .optim import ParamVector, TrainingTrace, softplus_inv
from .prediction import PredictionResult
from .svgpc import (
    SparseConfig, VariationalState, frozen_groups, init_inducing, inducing_kzz_factor,
    train_sparse, unpack_sparse,
)

LOG_BOUNDS = (-9.0, 9.0)
MIN_LOG_NOISE = math.log(1e-6)


@dataclass(frozen=True)
class GprConfig:
    lengthscale_init: float = 1.0
    signal_variance_init: float = 1.0
    noise_variance_init: float = 0.1
    optimize: bool = True
    learn_noise: bool = True
    maxiter: int = 500


@dataclass(frozen=True)
class GprModel:
    X_train: np.ndarray
    y_train: np.ndarray
    params: KernelParams
    chol: np.ndarray
    alpha: np.ndarray
    standardizer: Standardizer
    lml_trace: tuple = ()

    def predict(self, X):
        return predict_gpr(self, X)


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("regression needs at least one training point")
    if X.shape[0] != y.shape[0]:
        raise DataError("X and y lengths differ")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("regression inputs and SNR targets must be finite")
    return X, y


def gpr_log_marginal(theta, Xs, ys, xp=np):
    """Exact log marginal likelihood in standardized space.

    ``theta = [log l_1..log l_d, log sf2, log noise]``.
    """
    d = Xs.shape[1]
    ls, sf2, noise = xp.exp(theta[:d]), xp.exp(theta[d]), xp.exp(theta[d + 1])
    n = Xs.shape[0]
    K = sparse.se_kernel(Xs, Xs, ls, sf2, xp) + noise * xp.eye(n)
    L = xp.linalg.cholesky(K)
    a = sparse.solve_tri(L, ys, xp)
    return -0.5 * xp.sum(a * a) - xp.sum(xp.log(xp.diagonal(L))) - 0.5 * n * sparse.LOG_2PI


def fit_gpr(X, y, config: GprConfig | None = None, params: KernelParams | None = None) -> GprModel:
    """Fit exact GPR to raw inputs ``X`` and SNR targets ``y`` (dB).

    With ``config.optimize`` the log-hyperparameters maximize the log marginal
    likelihood by L-BFGS from ``params`` (or the configured initial values).
    """
    cfg = config or GprConfig()
    X, y = _check_xy(X, y)
    t = Standardizer.fit(X, y)
    Xs, ys = t.transform_x(X), t.transform_y(y)
    d = X.shape[1]
    if params is None:
        params = KernelParams(np.full(d, cfg.lengthscale_init), cfg.signal_variance_init,
                              cfg.noise_variance_init)
    trace = ()
    if cfg.optimize:
        params, trace = _optimize_gpr(Xs, ys, params, cfg)
    return _condition_gpr(X, y, Xs, ys, params, t, trace)


def _optimize_gpr(Xs, ys, params, cfg):
    d = Xs.shape[1]
    Xj, yj = jnp.asarray(Xs), jnp.asarray(ys)
    vg = jax.jit(jax.value_and_grad(lambda th: -gpr_log_marginal(th, Xj, yj, jnp)))
    noise0 = max(params.noise_variance, math.exp(MIN_LOG_NOISE))
    theta0 = np.concatenate([np.log(params.lengthscales), [math.log(params.signal_variance),
                                                            math.log(noise0)]])
    bounds = [LOG_BOUNDS] * (d + 1) + [(MIN_LOG_NOISE, LOG_BOUNDS[1])]
    if not cfg.learn_noise:
        bounds[-1] = (theta0[-1], theta0[-1])
    history = []
    last_good = {"theta": theta0}

    def fun(th):
        v, g = vg(th)
        v, g = float(v), np.asarray(g)
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            raise NonFiniteError("GPR marginal likelihood diverged", group="hyperparameters",
                                 state=last_good["theta"])
        last_good["theta"] = th.copy()
        history.append(-v)
        return v, g

    res = scipy.optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                                  options={"maxiter": cfg.maxiter})
    theta = res.x
    lml_init = history[0]
    lml_final = -float(vg(theta)[0])
    if lml_final < lml_init:
        theta, lml_final = theta0, lml_init
    params = KernelParams(np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1]))
    return params, (lml_init, lml_final)


def _condition_gpr(X, y, Xs, ys, params, t, trace):
    K = kernel_matrix(Xs, None, params)
    L, jitter = chol_psd(K, role="GPR K + noise")
    alpha = cho_solve((L, True), ys)
    return GprModel(X, y, params, L, alpha, t, tuple(trace))


def predict_gpr(model: GprModel, X) -> PredictionResult:
    """Posterior mean and latent variance of SNR (dB, dB^2)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite query")
    p = model.params
    Xs = model.standardizer.transform_x(X)
    Ks = kernel_matrix(Xs, model.standardizer.transform_x(model.X_train), p)
    mean = Ks @ model.alpha
    v = sparse.solve_tri(model.chol, Ks.T)
    var = np.maximum(p.signal_variance - np.sum(v * v, axis=0), 0.0)
    t = model.standardizer
    return PredictionResult(t.inverse_y(mean), t.inverse_y_var(var))


def log_marginal_likelihood(model: GprModel):
    Xs = model.standardizer.transform_x(model.X_train)
    ys = model.standardizer.transform_y(model.y_train)
    p = model.params
    theta = np.concatenate([np.log(p.lengthscales), [math.log(p.signal_variance),
                                                     math.log(max(p.noise_variance, 1e-300))]])
    return float(gpr_log_marginal(theta, Xs, ys))


# ---------------------------------------------------------------------------
# SVGPR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SvgprModel:
    params: ParamVector
    standardizer: Standardizer
    config: SparseConfig
    trace: TrainingTrace = field(default_factory=TrainingTrace)

    @property
    def kernel(self) -> KernelParams:
        ls, sf2, *_ = unpack_sparse(self.params.unpack())
        return KernelParams(ls, float(sf2), 0.0)

    @property
    def gaussian_noise(self) -> float:
        return float(np.exp(self.params.group("log_noise")))

    @property
    def variational(self) -> VariationalState:
        *_, Z, mu_s, L_s = unpack_sparse(self.params.unpack())
        return VariationalState(np.asarray(Z), np.asarray(mu_s), np.asarray(L_s))

    def predict(self, X):
        return predict_svgpr(self, X)


def regressor_params(Z, cfg: SparseConfig, dim=4):
    M = Z.shape[0]
    raw = np.zeros((M, M))
    raw[np.diag_indices(M)] = softplus_inv(math.sqrt(cfg.q_var_init))
    return ParamVector.from_groups({
        "log_lengthscales": np.full(dim, math.log(cfg.lengthscale_init)),
        "log_signal_variance": np.array(math.log(cfg.signal_variance_init)),
        "log_noise": np.array(math.log(cfg.noise_variance_init)),
        "Z": Z,
        "mu_s": np.zeros(M),
        "L_s": raw,
    })


def svgpr_objective(layout: ParamVector, n_total, jitter):
    """Uncollapsed Gaussian-likelihood ELBO, traceable ``f(flat, Xb, yb)``."""

    def objective(flat, Xb, yb):
        g = layout.unpack(flat)
        ls, sf2, _, Z, mu_s, L_s = unpack_sparse(g, jnp)
        noise = jnp.exp(g["log_noise"])
        Lz = sparse.kzz_chol(Z, ls, sf2, 0.0, jitter, jnp)
        mean, var = sparse.moments(Xb, Z, Lz, mu_s, L_s, ls, sf2, 0.0, jnp)
        ell = sparse.expected_gaussian(mean, var, yb, noise, jnp)
        return n_total / Xb.shape[0] * jnp.sum(ell) - sparse.kl_q_p(mu_s, L_s, Lz, jnp)

    return objective


def fit_svgpr(X, y, config: SparseConfig | None = None, Z=None, init=None) -> SvgprModel:
    """Fit SVGPR by minibatch Adam on the uncollapsed ELBO.

    ``init`` may override initial groups by name (standardized units).
    """
    cfg = config or SparseConfig()
    X, y = _check_xy(X, y)
    t = Standardizer.fit(X, y)
    Xs, ys = t.transform_x(X), t.transform_y(y)
    Zs = init_inducing(Xs, cfg) if Z is None else t.transform_x(Z)
    if Zs.shape[0] < 2 and X.shape[0] >= 2:
        raise DataError("SVGPR needs at least 2 inducing points")
    params = regressor_params(Zs, cfg, X.shape[1])
    if init:
        values = params.values.copy()
        for name, val in init.items():
            values[params.slices[name]] = np.ravel(val)
        params = params.with_values(values)
    objective = svgpr_objective(params, X.shape[0], cfg.jitter)
    frozen = frozen_groups(cfg, hyper=("log_lengthscales", "log_signal_variance", "log_noise"))
    params, trace = train_sparse(objective, params, Xs, ys, cfg, frozen)
    return SvgprModel(params, t, cfg, trace)


def svgpr_elbo(model: SvgprModel, X, y):
    """Full-batch ELBO of a fitted model on raw data."""
    t = model.standardizer
    obj = svgpr_objective(model.params, X.shape[0], model.config.jitter)
    return float(obj(model.params.values, jnp.asarray(t.transform_x(X)),
                     jnp.asarray(t.transform_y(y))))


def predict_svgpr(model: SvgprModel, X, include_noise=True) -> PredictionResult:
    """Predictive SNR mean and variance (latent variance plus Gaussian noise)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite query")
    p, vs = model.kernel, model.variational
    Lz = inducing_kzz_factor(vs, p, model.config.jitter)
    mean, var = sparse.moments(model.standardizer.transform_x(X), vs.Z, Lz, vs.mu_s, vs.L_s,
                               p.lengthscales, p.signal_variance, 0.0)
    if np.any(var < -1e-10):
        raise NumericalError("negative SVGPR predictive variance")
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + model.gaussian_noise
    t = model.standardizer
    return PredictionResult(t.inverse_y(mean), t.inverse_y_var(var))
