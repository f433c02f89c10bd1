"""Noisy-input sparse GP classification with an amortized recognition network (NI-NN).

Logged inputs are ``x_tilde = x + eps`` with ``eps ~ N(0, V)`` and diagonal
``V``. A one-hidden-layer network maps ``(x_tilde, y)`` to the mean and
diagonal variance of q(x); the ELBO adds the input-likelihood and input-KL
terms to the SVGPC bound and is estimated with reparameterized samples.

``V`` is either supplied per event (navigation covariance, kept fixed) or a
single shared diagonal learned with everything else. Dimensions whose
supplied variance is exactly zero are treated as noise-free: the sample is
pinned to the logged value and their input terms are dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import sparse
from .data import Standardizer
from .errors import ConfigError, DataError
from .kernel import KernelParams
from .optim import (
    ParamVector, TrainingTrace, gh_nodes, run_adam, seeded_stream, softplus, softplus_inv,
)
from .prediction import PredictionResult, logistic_gauss_probability
from .svgpc import (
    SparseConfig, VariationalState, classifier_params, frozen_groups, init_inducing,
    kernel_from_groups, latent_moments, state_from_groups, unpack_sparse,
)

NET_GROUPS = ("W1", "b1", "W_mean", "b_mean", "W_var", "b_var")


@dataclass(frozen=True)
class NoisyInput:
    x_tilde: np.ndarray
    V: np.ndarray
    label: int

    def __post_init__(self):
        if np.any(np.asarray(self.V) < 0):
            raise DataError("input-noise variances must be non-negative")
        if self.label not in (0, 1):
            raise DataError("label must be 0 or 1")


@dataclass(frozen=True)
class NiConfig(SparseConfig):
    hidden_units: int = 50
    samples: int = 1
    prior_sd: float = 3.0
    learn_V: bool = False
    V_init: float = 0.05
    predict_samples: int = 50


@dataclass(frozen=True)
class RecognitionNet:
    """tanh hidden layer, linear mean head, softplus variance head."""

    W1: np.ndarray
    b1: np.ndarray
    W_mean: np.ndarray
    b_mean: np.ndarray
    W_var: np.ndarray
    b_var: np.ndarray

    @classmethod
    def from_groups(cls, g):
        return cls(*(np.asarray(g[n]) for n in NET_GROUPS))

    def groups(self):
        return {n: getattr(self, n) for n in NET_GROUPS}


def net_forward(g, x_tilde, y, xp=np):
    """Batched forward pass on rows of ``x_tilde`` with labels ``y``."""
    inp = xp.concatenate([x_tilde, y[:, None]], axis=1)
    h = xp.tanh(inp @ g["W1"] + g["b1"])
    return h @ g["W_mean"] + g["b_mean"], softplus(h @ g["W_var"] + g["b_var"], xp)


def recognition_forward(net: RecognitionNet, x_tilde, y):
    """Mean and variance of q(x) for one observation."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    if not np.all(np.isfinite(x_tilde)):
        raise DataError("non-finite network input")
    g = net.groups()
    if not all(np.all(np.isfinite(v)) for v in g.values()):
        raise DataError("non-finite network weights")
    mean, var = net_forward(g, x_tilde[None, :], np.array([float(y)]))
    return mean[0], var[0]


def sample_q_x(mean, var, seed):
    """Reparameterized draw ``mean + sqrt(var) * eps`` with seeded ``eps``."""
    mean = np.asarray(mean, dtype=float)
    eps = seeded_stream(seed, "sample_q_x").standard_normal(mean.shape)
    return mean + np.sqrt(np.asarray(var, dtype=float)) * eps


def input_loglik_term(x_tilde, q_mean, q_var, V, pinned=None, xp=np):
    """Closed-form E_q[log N(x_tilde | x, V)] summed over non-pinned dimensions."""
    Vs = V if pinned is None else xp.where(pinned, 1.0, V)
    t = -0.5 * (sparse.LOG_2PI + xp.log(Vs)) - 0.5 * ((x_tilde - q_mean) ** 2 + q_var) / Vs
    if pinned is not None:
        t = xp.where(pinned, 0.0, t)
    return xp.sum(t, axis=-1)


def input_kl_term(q_mean, q_var, prior_var, pinned=None, xp=np):
    """KL( N(q_mean, diag q_var) || N(0, prior_var I) ) summed over non-pinned dimensions."""
    t = 0.5 * ((q_var + q_mean**2) / prior_var - 1.0 - xp.log(q_var) + math.log(prior_var))
    if pinned is not None:
        t = xp.where(pinned, 0.0, t)
    return xp.sum(t, axis=-1)


def ni_params(Z, net: RecognitionNet, cfg: NiConfig, dim):
    groups = classifier_params(Z, cfg, dim).unpack()
    groups = {k: np.asarray(v) for k, v in groups.items()}
    groups.update(net.groups())
    if cfg.learn_V:
        groups["log_V"] = np.full(dim, math.log(cfg.V_init))
    return ParamVector.from_groups(groups)


def init_net(Xs, y, Vs, cfg: NiConfig, dim):
    """Random hidden layer; mean head fitted by ridge regression so mu(x_tilde) ~ x_tilde."""
    rng = seeded_stream(cfg.seed, "net-init")
    H = cfg.hidden_units
    W1 = rng.standard_normal((dim + 1, H)) / math.sqrt(dim + 1)
    b1 = 0.1 * rng.standard_normal(H)
    hid = np.tanh(np.hstack([Xs, y[:, None]]) @ W1 + b1)
    A = np.hstack([hid, np.ones((hid.shape[0], 1))])
    coef = np.linalg.solve(A.T @ A + 1e-3 * np.eye(H + 1), A.T @ Xs)
    if cfg.learn_V:
        v0 = np.full(dim, cfg.V_init)
    else:
        v0 = np.array([np.median(c[c > 0]) if np.any(c > 0) else cfg.V_init for c in Vs.T])
    return RecognitionNet(W1, b1, coef[:-1], coef[-1], np.zeros((H, dim)), softplus_inv(v0))


def ni_objective(layout: ParamVector, n_total, nodes, weights, jitter, prior_var, learn_V):
    """Traceable ``f(flat, Xb, yb, Vb, eps)``; ``eps`` has shape (S, batch, d)."""
    nodes = jnp.asarray(nodes)
    weights = jnp.asarray(weights)

    def objective(flat, Xb, yb, Vb, eps):
        g = layout.unpack(flat)
        ls, sf2, nugget, Z, mu_s, L_s = unpack_sparse(g, jnp)
        Lz = sparse.kzz_chol(Z, ls, sf2, nugget, jitter, jnp)
        q_mean, q_var = net_forward(g, Xb, yb, jnp)
        if learn_V:
            V = jnp.broadcast_to(jnp.exp(g["log_V"]), Xb.shape)
            pinned = None
        else:
            V = Vb
            pinned = Vb == 0.0
        S, B, d = eps.shape
        x = q_mean + jnp.sqrt(q_var) * eps
        if pinned is not None:
            x = jnp.where(pinned, Xb, x)
        mean, var = sparse.moments(x.reshape(S * B, d), Z, Lz, mu_s, L_s, ls, sf2, nugget, jnp)
        ell = sparse.expected_bernoulli(mean, var, jnp.tile(yb, S), nodes, weights, jnp)
        term1 = jnp.sum(ell) / S
        term2 = jnp.sum(input_loglik_term(Xb, q_mean, q_var, V, pinned, jnp))
        kl_x = jnp.sum(input_kl_term(q_mean, q_var, prior_var, pinned, jnp))
        kl_u = sparse.kl_q_p(mu_s, L_s, Lz, jnp)
        return n_total / B * (term1 + term2 - kl_x) - kl_u

    return objective


def elbo_nn(X_tilde, y, V, params: ParamVector, cfg: NiConfig, n_total=None, samples=1, seed=0):
    """ELBO_NN of a batch in standardized units with ``samples`` draws per point."""
    X_tilde = np.atleast_2d(np.asarray(X_tilde, dtype=float))
    B, d = X_tilde.shape
    n_total = B if n_total is None else n_total
    nodes, weights = gh_nodes(cfg.gh_nodes)
    obj = ni_objective(params, n_total, nodes, weights, cfg.jitter, cfg.prior_sd**2, cfg.learn_V)
    eps = seeded_stream(seed, "elbo-eps").standard_normal((samples, B, d))
    V = np.zeros_like(X_tilde) if V is None else np.broadcast_to(V, X_tilde.shape)
    return float(obj(params.values, jnp.asarray(X_tilde), jnp.asarray(y, dtype=float),
                     jnp.asarray(V), jnp.asarray(eps)))


@dataclass(frozen=True)
class NiModel:
    params: ParamVector
    standardizer: Standardizer
    config: NiConfig
    trace: TrainingTrace = field(default_factory=TrainingTrace)

    @property
    def kernel(self) -> KernelParams:
        return kernel_from_groups(self.params.unpack())

    @property
    def variational(self) -> VariationalState:
        return state_from_groups(self.params.unpack())

    @property
    def net(self) -> RecognitionNet:
        return RecognitionNet.from_groups(self.params.unpack())

    @property
    def shared_V(self):
        """Learned input-noise variances in raw units, or ``None`` when supplied."""
        if "log_V" not in self.params.slices:
            return None
        return self.standardizer.inverse_var(np.exp(self.params.group("log_V")))

    def predict(self, X, V=None, samples=None, seed=0):
        if V is None:
            V = self.shared_V if self.shared_V is not None else np.zeros(X.shape[-1])
        return predict_ni(self, X, V, samples or self.config.predict_samples, seed)


def fit_ni_nn(X_tilde, y, V=None, config: NiConfig | None = None, Z=None) -> NiModel:
    """Fit NI-NN on raw logged inputs and labels.

    ``V`` holds per-event diagonal input variances (raw units); pass ``None``
    with ``config.learn_V`` to learn one shared diagonal instead.
    """
    cfg = config or NiConfig()
    X = np.asarray(X_tilde, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n == 0 or y.shape != (n,):
        raise DataError("NI-NN needs matching, non-empty inputs and labels")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    if V is None and not cfg.learn_V:
        raise ConfigError("supply per-event V or set learn_V")
    t = Standardizer.fit(X)
    Xs = t.transform_x(X)
    Vs = np.zeros_like(Xs) if V is None else t.transform_var(np.broadcast_to(V, X.shape))
    if np.any(Vs < 0):
        raise DataError("input-noise variances must be non-negative")
    Zs = init_inducing(Xs, cfg) if Z is None else t.transform_x(Z)
    net = init_net(Xs, y, Vs, cfg, d)
    params = ni_params(Zs, net, cfg, d)
    nodes, weights = gh_nodes(cfg.gh_nodes)
    objective = ni_objective(params, n, nodes, weights, cfg.jitter, cfg.prior_sd**2, cfg.learn_V)
    vg = jax.jit(jax.value_and_grad(objective))
    full = jax.jit(objective)
    Xj, yj, Vj = jnp.asarray(Xs), jnp.asarray(y), jnp.asarray(Vs)
    trace_eps = jnp.asarray(seeded_stream(cfg.seed, "trace-eps").standard_normal((cfg.samples, n, d)))
    trace = TrainingTrace(elbo_initial=float(full(params.values, Xj, yj, Vj, trace_eps)))
    eps_rng = seeded_stream(cfg.seed, "reparam")

    def step(flat, idx, _):
        eps = eps_rng.standard_normal((cfg.samples, idx.shape[0], d))
        return vg(flat, Xj[idx], yj[idx], Vj[idx], jnp.asarray(eps))

    rng = seeded_stream(cfg.seed, "minibatch")
    params, means = run_adam(step, params, n, cfg.batch_size, cfg.epochs, rng,
                             step_size=cfg.step_size, frozen=frozen_groups(cfg))
    trace.epoch_means = means
    trace.elbo_final = float(full(params.values, Xj, yj, Vj, trace_eps))
    return NiModel(params, t, cfg, trace)


def predict_ni(model: NiModel, X_tilde, V_star, samples=50, seed=0) -> PredictionResult:
    """Success probability averaged over test inputs drawn from N(x_tilde, V_star).

    A zero ``V_star`` collapses to a single deterministic evaluation. The
    reported latent mean/variance are those of the sample mixture.
    """
    X = np.atleast_2d(np.asarray(X_tilde, dtype=float))
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite query")
    if samples < 1:
        raise ConfigError("need at least one prediction sample")
    t = model.standardizer
    Xs = t.transform_x(X)
    Vs = t.transform_var(np.broadcast_to(np.asarray(V_star, dtype=float), X.shape))
    if np.any(Vs < 0):
        raise DataError("V_star must be non-negative")
    vs, p, m = model.variational, model.kernel, model.config.gh_nodes
    jitter = model.config.jitter
    if not np.any(Vs > 0):
        mom = latent_moments(Xs, vs, p, jitter)
        var = mom.sigma**2
        return PredictionResult(mom.mu, var, logistic_gauss_probability(mom.mu, var, m))
    n, d = Xs.shape
    eps = seeded_stream(seed, "predict-ni").standard_normal((samples, n, d))
    draws = Xs[None] + np.sqrt(Vs)[None] * eps
    mom = latent_moments(draws.reshape(samples * n, d), vs, p, jitter)
    mu = mom.mu.reshape(samples, n)
    var = (mom.sigma**2).reshape(samples, n)
    prob = logistic_gauss_probability(mu, var, m).mean(axis=0)
    mix_mean = mu.mean(axis=0)
    mix_var = var.mean(axis=0) + mu.var(axis=0)
    return PredictionResult(mix_mean, mix_var, prob)
