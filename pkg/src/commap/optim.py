"""Optimization and numerical plumbing shared by the trainable models.

Gradients come from JAX reverse-mode differentiation in double precision; the
normative contract is agreement with central finite differences, which
:func:`finite_difference_check` measures.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import jax
import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import ConfigError, NonFiniteError

jax.config.update("jax_enable_x64", True)


def softplus(x, xp=np):
    return xp.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass
class ParamVector:
    """Flat parameter vector with named group slices.

    Constrained quantities are stored unconstrained (log or inverse-softplus),
    the owning model knows which.
    """

    values: np.ndarray
    slices: dict
    shapes: dict

    @classmethod
    def from_groups(cls, groups):
        slices, shapes, parts = {}, {}, []
        start = 0
        for name, arr in groups.items():
            arr = np.asarray(arr, dtype=float)
            slices[name] = slice(start, start + arr.size)
            shapes[name] = arr.shape
            parts.append(arr.ravel())
            start += arr.size
        values = np.concatenate(parts) if parts else np.zeros(0)
        return cls(values, slices, shapes)

    @property
    def names(self):
        return list(self.slices)

    def __len__(self):
        return self.values.shape[0]

    def group(self, name):
        return self.values[self.slices[name]].reshape(self.shapes[name])

    def unpack(self, flat=None):
        """Split ``flat`` (numpy or traced jax array) into a dict of shaped groups."""
        flat = self.values if flat is None else flat
        return {n: flat[s].reshape(self.shapes[n]) for n, s in self.slices.items()}

    def with_values(self, values):
        return ParamVector(np.asarray(values, dtype=float), self.slices, self.shapes)

    def group_of(self, index):
        for name, s in self.slices.items():
            if s.start <= index < s.stop:
                return name
        return None

    def first_nonfinite_group(self, vec):
        bad = np.flatnonzero(~np.isfinite(vec))
        return self.group_of(int(bad[0])) if bad.size else None


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    step_size: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, step_size=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, step_size, beta1, beta2, eps)


def adam_step(state: AdamState, params: ParamVector, grad):
    """One bias-corrected Adam *ascent* step. Returns new ``(state, params)``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.values.shape:
        raise ConfigError(f"gradient length {grad.shape} != parameter length {params.values.shape}")
    group = params.first_nonfinite_group(grad)
    if group is not None:
        raise NonFiniteError("non-finite gradient", group=group)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    values = params.values + state.step_size * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(m, v, t, state.step_size, state.beta1, state.beta2, state.eps)
    return new_state, params.with_values(values)


def gh_nodes(m: int):
    """Gauss-Hermite nodes and weights for the weight function exp(-t^2).

    Golub-Welsch: nodes are eigenvalues of the symmetric Jacobi matrix, weights
    are sqrt(pi) times the squared first eigenvector components.
    """
    if not isinstance(m, (int, np.integer)) or not 2 <= m <= 64:
        raise ConfigError(f"Gauss-Hermite node count must be in [2, 64], got {m!r}")
    off = np.sqrt(np.arange(1, m) / 2.0)
    nodes, vecs = eigh_tridiagonal(np.zeros(m), off)
    weights = np.sqrt(np.pi) * vecs[0, :] ** 2
    # enforce exact symmetry about zero
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights


def grad_elbo(objective: Callable, params: ParamVector):
    """Exact gradient of a scalar JAX-traceable ``objective(flat)`` at ``params``."""
    value, grad = jax.value_and_grad(objective)(params.values)
    value = float(value)
    grad = np.asarray(grad)
    if not np.isfinite(value):
        raise NonFiniteError("objective is not finite")
    group = params.first_nonfinite_group(grad)
    if group is not None:
        raise NonFiniteError("non-finite gradient", group=group)
    return grad


def finite_difference_check(objective, x, grad, step=1e-5, floor=1e-3):
    """Per-coordinate relative error between ``grad`` and central differences.

    Relative error is ``|g - fd| / max(|g|, |fd|, floor)``; the floor keeps
    coordinates whose true derivative is ~0 from dividing by roundoff.
    """
    x = np.asarray(x, dtype=float)
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        fd[i] = (float(objective(x + e)) - float(objective(x - e))) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), floor)
    return np.abs(grad - fd) / denom, fd


def _stream_key(stream_id):
    if isinstance(stream_id, str):
        return zlib.crc32(stream_id.encode("utf-8"))
    return int(stream_id)


def seeded_stream(seed, stream_id=0) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, stream_id)``.

    ``stream_id`` may be an int, a string, or a tuple of those for nested
    sub-streams.
    """
    ids = stream_id if isinstance(stream_id, tuple) else (stream_id,)
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_stream_key(s) for s in ids))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class TrainingTrace:
    """Diagnostics recorded by :func:`run_adam`."""

    elbo_initial: float = float("nan")
    elbo_final: float = float("nan")
    epoch_means: list = field(default_factory=list)

    def to_dict(self):
        return {
            "elbo_initial": self.elbo_initial,
            "elbo_final": self.elbo_final,
            "epoch_means": list(self.epoch_means),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["elbo_initial"], d["elbo_final"], list(d["epoch_means"]))


def minibatches(n, batch_size, rng):
    """Yield index arrays covering a fresh permutation of ``range(n)``."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def run_adam(value_and_grad, params: ParamVector, n, batch_size, epochs, rng,
             step_size=0.01, frozen=()):
    """Minibatch Adam ascent.

    ``value_and_grad(flat, idx, step)`` returns the stochastic objective and its
    gradient for the rows ``idx``; ``step`` is the global step counter, which
    stochastic objectives use to derive their noise. Groups named in
    ``frozen`` keep their initial values.
    """
    state = AdamState.zeros(len(params), step_size=step_size)
    mask = np.ones(len(params))
    for name in frozen:
        mask[params.slices[name]] = 0.0
    batch_size = min(batch_size, n)
    means = []
    step = 0
    for _ in range(epochs):
        vals = []
        for idx in minibatches(n, batch_size, rng):
            value, grad = value_and_grad(params.values, idx, step)
            value = float(value)
            if not np.isfinite(value):
                raise NonFiniteError(f"objective became non-finite at step {step}", state=params)
            state, params = adam_step(state, params, np.asarray(grad) * mask)
            vals.append(value)
            step += 1
        means.append(float(np.mean(vals)))
    return params, means
