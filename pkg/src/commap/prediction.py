"""Prediction containers and the logistic-Gaussian integral."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .optim import gh_nodes


@dataclass(frozen=True)
class PredictionResult:
    """Per-query predictions.

    Regression fills ``mean``/``variance`` (dB, dB^2). Classification fills
    ``probability`` and reports the latent mean and variance alongside.
    """

    mean: np.ndarray
    variance: np.ndarray
    probability: np.ndarray | None = None

    @property
    def value(self):
        """The quantity compared against a threshold."""
        return self.mean if self.probability is None else self.probability

    def __len__(self):
        return np.shape(self.mean)[0]


def logistic(f):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(f, dtype=float)))


def logistic_gauss_probability(mean, var, m=20):
    """E[logistic(f)] for f ~ N(mean, var) by ``m``-node Gauss-Hermite.

    Written as 1/2 + 1/2 E[tanh(f/2)] with mirrored nodes summed in pairs, so a
    zero mean gives exactly one half and negating the mean gives the complement.
    """
    nodes, weights = gh_nodes(m)
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    t = np.tanh(0.5 * (mean[..., None] + math.sqrt(2.0) * sd[..., None] * nodes))
    half = m // 2
    paired = t[..., :half] + t[..., ::-1][..., :half]
    s = paired @ weights[:half]
    if m % 2:
        s = s + t[..., half] * weights[half]
    return 0.5 + 0.5 * s / weights.sum()
