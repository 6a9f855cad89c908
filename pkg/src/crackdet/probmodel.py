"""Gaussian two-class Bayes posterior for a single pixel intensity.

With equal-variance Gaussian class likelihoods the crack posterior is a
sigmoid of an exponent that is linear in the intensity. Both routes are
implemented here so each can check the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class GaussianClassModel:
    mu0: float
    mu1: float
    sigma: float
    prior1: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0.0 < self.prior1 < 1.0:
            raise ValueError("prior1 must lie in (0, 1)")

    @property
    def prior0(self) -> float:
        return 1.0 - self.prior1


def sigmoid(a):
    """Logistic function without overflow for large ``|a|``."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out if out.ndim else float(out)


def linear_exponent(m: GaussianClassModel) -> tuple[float, float]:
    """Slope ``w`` and offset ``w0`` of the log-odds ``a(x) = w x + w0``."""
    s2 = m.sigma ** 2
    w = (m.mu1 - m.mu0) / s2
    w0 = (m.mu0 ** 2 - m.mu1 ** 2) / (2 * s2) + math.log(m.prior1 / m.prior0)
    return w, w0


def _log_gauss(x, mu, sigma):
    return -((x - mu) ** 2) / (2 * sigma ** 2) - math.log(sigma) - _LOG_SQRT_2PI


def posterior_direct(m: GaussianClassModel, x):
    """Bayes' rule on the class densities, evaluated in log space."""
    x = np.asarray(x, dtype=np.float64)
    log_joint1 = _log_gauss(x, m.mu1, m.sigma) + math.log(m.prior1)
    log_joint0 = _log_gauss(x, m.mu0, m.sigma) + math.log(m.prior0)
    out = np.exp(log_joint1 - np.logaddexp(log_joint0, log_joint1))
    return out if out.ndim else float(out)


def posterior_via_sigmoid(m: GaussianClassModel, x):
    w, w0 = linear_exponent(m)
    return sigmoid(w * np.asarray(x, dtype=np.float64) + w0)


def posterior_curve(m: GaussianClassModel, xs) -> list[tuple[float, float, float]]:
    xs = np.asarray(xs, dtype=np.float64)
    direct = np.atleast_1d(posterior_direct(m, xs))
    via = np.atleast_1d(posterior_via_sigmoid(m, xs))
    return [(float(x), float(d), float(v)) for x, d, v in zip(xs, direct, via)]
