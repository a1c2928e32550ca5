"""Wrapped normal density, sampling, and the gradient in its mean.

The density is the 2*pi-periodic sum of Gaussian bumps

    WN(r | mu, s2) = (2*pi*s2)^(-1/2) * sum_k exp(-(r - mu + 2*pi*k)^2 / (2*s2)),

truncated at |k| <= k_trunc and evaluated in log-sum-exp form so small
variances do not underflow.  The gradient with respect to the mean is the
softmax-weighted sum of (r - mu + 2*pi*k) / s2, which is the term the
kinetic score target consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .torus import TWO_PI, wrap_angle

DEFAULT_K_TRUNC = 10


@dataclass(frozen=True)
class WrappedNormalParams:
    """Mean, variance and series truncation order of a wrapped normal."""

    mu: np.ndarray
    sigma2: np.ndarray
    k_trunc: int = DEFAULT_K_TRUNC

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "sigma2", np.asarray(self.sigma2, dtype=float))
        if np.any(self.sigma2 < 0):
            raise ValueError("sigma2 must be nonnegative")
        if np.any(self.sigma2 > 0) and self.k_trunc < 1:
            raise ValueError("k_trunc must be >= 1 when sigma2 > 0")


def _series_terms(r, mu, sigma2, k_trunc):
    """Log-weights of the truncated series, stacked on a leading k-axis."""
    r = np.asarray(r, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    k = np.arange(-k_trunc, k_trunc + 1, dtype=float)
    k = k.reshape((2 * k_trunc + 1,) + (1,) * max(r.ndim, mu.ndim, sigma2.ndim))
    x = r - mu + TWO_PI * k
    return x, -0.5 * x * x / sigma2


def wn_sample(params: WrappedNormalParams, rng: np.random.Generator):
    """Draw (r, eps) with r = wrap(mu + sqrt(sigma2) * eps), eps standard normal.

    The pre-wrap Gaussian draw eps is returned because the training target
    construction consumes it.  eps is drawn even at sigma2 = 0 so the rng
    stream advances identically for all variances.
    """
    shape = np.broadcast_shapes(params.mu.shape, params.sigma2.shape)
    eps = rng.standard_normal(shape)
    r = wrap_angle(params.mu + np.sqrt(params.sigma2) * eps)
    return r, eps


def wn_logpdf(r, params: WrappedNormalParams):
    """Log-density of the truncated wrapped normal at angle(s) r."""
    if np.any(params.sigma2 == 0):
        raise ValueError("wn_logpdf is degenerate at sigma2 = 0")
    _, logw = _series_terms(r, params.mu, params.sigma2, params.k_trunc)
    out = logsumexp(logw, axis=0) - 0.5 * np.log(TWO_PI * params.sigma2)
    return out[()] if np.ndim(out) == 0 else out


def wn_score_mean(r, params: WrappedNormalParams):
    """Gradient of wn_logpdf with respect to the mean mu.

    Equals sum_k softmax_k(logw) * (r - mu + 2*pi*k) / sigma2 over the
    truncated series.
    """
    if np.any(params.sigma2 == 0):
        raise ValueError("wn_score_mean is degenerate at sigma2 = 0")
    x, logw = _series_terms(r, params.mu, params.sigma2, params.k_trunc)
    logw = logw - logsumexp(logw, axis=0, keepdims=True)
    out = np.sum(np.exp(logw) * x, axis=0) / params.sigma2
    return out[()] if np.ndim(out) == 0 else out
