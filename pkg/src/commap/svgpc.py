"""Sparse variational GP binary classification (SVGPC).

The expected Bernoulli log-likelihood is integrated with Gauss-Hermite
quadrature; the variational covariance is parameterized by its Cholesky
factor with a softplus diagonal. Hyperparameters, inducing inputs and the
variational parameters are learned jointly by minibatch Adam on the ELBO.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import sparse
from .data import Standardizer
from .errors import DataError, NumericalError
from .kernel import JITTER, KernelParams, chol_psd
from .optim import (
    ParamVector, TrainingTrace, gh_nodes, run_adam, seeded_stream, softplus, softplus_inv,
)
from .prediction import PredictionResult, logistic_gauss_probability

NEG_VAR_TOL = 1e-10


@dataclass(frozen=True)
class VariationalState:
    """Inducing inputs ``Z`` and q(f_s) = N(mu_s, L_s L_s^T)."""

    Z: np.ndarray
    mu_s: np.ndarray
    L_s: np.ndarray

    def __post_init__(self):
        M = self.Z.shape[0]
        if self.mu_s.shape != (M,) or self.L_s.shape != (M, M):
            raise DataError("inconsistent variational state shapes")

    @property
    def M(self):
        return self.Z.shape[0]

    @property
    def S(self):
        return self.L_s @ self.L_s.T


@dataclass(frozen=True)
class LatentMoments:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class SparseConfig:
    """Training settings shared by the sparse models."""

    epochs: int = 1000
    batch_size: int = 50
    inducing_fraction: float = 0.05
    min_inducing: int = 2
    step_size: float = 0.01
    gh_nodes: int = 20
    seed: int = 0
    lengthscale_init: float = 1.0
    signal_variance_init: float = 1.0
    nugget_init: float = 1e-2
    noise_variance_init: float = 0.1
    q_var_init: float = 0.1
    learn_hyperparameters: bool = True
    learn_inducing: bool = True
    jitter: float = JITTER


def n_inducing(n, cfg: SparseConfig):
    return int(min(n, max(cfg.min_inducing, math.ceil(cfg.inducing_fraction * n))))


def init_inducing(Xs, cfg: SparseConfig, stream="inducing"):
    """Inducing inputs placed on a random subset of training points."""
    n = Xs.shape[0]
    M = n_inducing(n, cfg)
    idx = np.sort(seeded_stream(cfg.seed, stream).choice(n, size=M, replace=False))
    return Xs[idx].copy()


def inducing_kzz_factor(vs: VariationalState, p: KernelParams, jitter=0.0):
    K = sparse.se_kernel(vs.Z, vs.Z, p.lengthscales, p.signal_variance)
    K = 0.5 * (K + K.T) + (p.noise_variance + jitter) * np.eye(vs.M)
    return chol_psd(K, role="K_ZZ").L


def latent_moments(x, vs: VariationalState, p: KernelParams, jitter=0.0) -> LatentMoments:
    """Mean and standard deviation of q(f(x)) for one point or a batch of rows."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite query")
    Lz = inducing_kzz_factor(vs, p, jitter)
    mu, var = sparse.moments(X, vs.Z, Lz, vs.mu_s, vs.L_s, p.lengthscales,
                             p.signal_variance, p.noise_variance)
    if np.any(var < -NEG_VAR_TOL):
        raise NumericalError(f"negative latent variance {var.min():.3e}; factorization is broken")
    sigma = np.sqrt(np.maximum(var, 0.0))
    if np.ndim(x) == 1:
        return LatentMoments(mu[0], sigma[0])
    return LatentMoments(mu, sigma)


def expected_loglik_gh(mom: LatentMoments, y, m=20):
    """Gauss-Hermite approximation of E[log p(y | f)], f ~ N(mu, sigma^2)."""
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    nodes, weights = gh_nodes(m)
    mu = np.asarray(mom.mu, dtype=float)
    sigma = np.asarray(mom.sigma, dtype=float)
    return sparse.expected_bernoulli(mu, sigma**2, y.astype(float), nodes, weights)


def gaussian_kl(vs: VariationalState, p: KernelParams, jitter=0.0):
    """KL(q(f_s) || p(f_s)) in closed form."""
    return float(sparse.kl_q_p(vs.mu_s, vs.L_s, inducing_kzz_factor(vs, p, jitter)))


def elbo_svgpc(X, y, vs: VariationalState, p: KernelParams, n_total=None, m=20, jitter=0.0):
    """Minibatch ELBO: (N / |batch|) sum E_q[log p(y|f)] - KL(q(f_s) || p(f_s))."""
    X = np.atleast_2d(X)
    n_total = X.shape[0] if n_total is None else n_total
    ell = expected_loglik_gh(latent_moments(X, vs, p, jitter), y, m)
    return float(n_total / X.shape[0] * np.sum(ell) - gaussian_kl(vs, p, jitter))


# ---------------------------------------------------------------------------
# Flat parameterization used by training
# ---------------------------------------------------------------------------

def classifier_params(Z, cfg: SparseConfig, dim=4):
    M = Z.shape[0]
    raw = np.zeros((M, M))
    raw[np.diag_indices(M)] = softplus_inv(math.sqrt(cfg.q_var_init))
    return ParamVector.from_groups({
        "log_lengthscales": np.full(dim, math.log(cfg.lengthscale_init)),
        "log_signal_variance": np.array(math.log(cfg.signal_variance_init)),
        "log_nugget": np.array(math.log(cfg.nugget_init)),
        "Z": Z,
        "mu_s": np.zeros(M),
        "L_s": raw,
    })


def unpack_sparse(g, xp=np):
    """Constrained kernel and variational quantities from unpacked groups."""
    ls = xp.exp(g["log_lengthscales"])
    sf2 = xp.exp(g["log_signal_variance"])
    nugget = xp.exp(g["log_nugget"]) if "log_nugget" in g else 0.0
    return ls, sf2, nugget, g["Z"], g["mu_s"], sparse.lower_factor(g["L_s"], xp)


def kernel_from_groups(g) -> KernelParams:
    ls, sf2, nugget, *_ = unpack_sparse(g)
    return KernelParams(ls, float(sf2), float(nugget))


def state_from_groups(g) -> VariationalState:
    *_, Z, mu_s, L_s = unpack_sparse(g)
    return VariationalState(np.asarray(Z), np.asarray(mu_s), np.asarray(L_s))


def svgpc_objective(layout: ParamVector, n_total, nodes, weights, jitter):
    """Traceable ``f(flat, Xb, yb)`` returning the minibatch ELBO."""
    nodes = jnp.asarray(nodes)
    weights = jnp.asarray(weights)

    def objective(flat, Xb, yb):
        ls, sf2, nugget, Z, mu_s, L_s = unpack_sparse(layout.unpack(flat), jnp)
        Lz = sparse.kzz_chol(Z, ls, sf2, nugget, jitter, jnp)
        mean, var = sparse.moments(Xb, Z, Lz, mu_s, L_s, ls, sf2, nugget, jnp)
        ell = sparse.expected_bernoulli(mean, var, yb, nodes, weights, jnp)
        return n_total / Xb.shape[0] * jnp.sum(ell) - sparse.kl_q_p(mu_s, L_s, Lz, jnp)

    return objective


def frozen_groups(cfg: SparseConfig, hyper=("log_lengthscales", "log_signal_variance", "log_nugget")):
    frozen = []
    if not cfg.learn_hyperparameters:
        frozen.extend(hyper)
    if not cfg.learn_inducing:
        frozen.append("Z")
    return tuple(frozen)


def train_sparse(objective, params: ParamVector, Xs, targets, cfg: SparseConfig, frozen=()):
    """Adam ascent of ``objective(flat, Xb, yb)`` over minibatches; returns params and trace."""
    vg = jax.jit(jax.value_and_grad(objective))
    full = jax.jit(objective)
    Xj, yj = jnp.asarray(Xs), jnp.asarray(targets)
    trace = TrainingTrace(elbo_initial=float(full(params.values, Xj, yj)))

    def step(flat, idx, _):
        return vg(flat, Xj[idx], yj[idx])

    rng = seeded_stream(cfg.seed, "minibatch")
    params, means = run_adam(step, params, Xs.shape[0], cfg.batch_size, cfg.epochs, rng,
                             step_size=cfg.step_size, frozen=frozen)
    trace.epoch_means = means
    trace.elbo_final = float(full(params.values, Xj, yj))
    if not np.isfinite(trace.elbo_final):
        raise NumericalError("final ELBO is not finite")
    return params, trace


@dataclass(frozen=True)
class SvgpcModel:
    params: ParamVector
    standardizer: Standardizer
    config: SparseConfig
    trace: TrainingTrace = field(default_factory=TrainingTrace)

    @property
    def kernel(self) -> KernelParams:
        return kernel_from_groups(self.params.unpack())

    @property
    def variational(self) -> VariationalState:
        return state_from_groups(self.params.unpack())

    def predict(self, X):
        return predict_svgpc(self, X)


def fit_svgpc(X, y, config: SparseConfig | None = None, Z=None) -> SvgpcModel:
    """Fit SVGPC on raw inputs ``X`` (N x 4) and binary labels ``y``.

    ``Z`` optionally fixes the initial inducing inputs in raw units.
    """
    cfg = config or SparseConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise DataError("no training events")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    t = Standardizer.fit(X)
    Xs = t.transform_x(X)
    Zs = init_inducing(Xs, cfg) if Z is None else t.transform_x(Z)
    params = classifier_params(Zs, cfg, X.shape[1])
    nodes, weights = gh_nodes(cfg.gh_nodes)
    objective = svgpc_objective(params, X.shape[0], nodes, weights, cfg.jitter)
    params, trace = train_sparse(objective, params, Xs, y.astype(float), cfg, frozen_groups(cfg))
    return SvgpcModel(params, t, cfg, trace)


def predict_svgpc(model: SvgpcModel, X) -> PredictionResult:
    """Success probability with latent mean and variance at raw query inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite query")
    mom = latent_moments(model.standardizer.transform_x(X), model.variational,
                         model.kernel, model.config.jitter)
    var = mom.sigma**2
    return PredictionResult(mom.mu, var, logistic_gauss_probability(mom.mu, var, model.config.gh_nodes))
