"""Exact single-output Gaussian process regression.

This is the per-latent engine: zero prior mean, a kernel spec from
:mod:`orthogp.kernels`, and homoscedastic (or per-observation) Gaussian
noise.  All solves go through Cholesky factors.  Conditioning, marginal
likelihood and posterior sampling are pure functions, safe to call
concurrently.

The exact solver is wrapped in :class:`ExactBackend` so that approximate
single-output backends (inducing points, state-space filters) can be plugged
in behind the same three-method interface later; only the exact backend
ships.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from ._linalg import LOG_2PI, chol_logdet, chol_solve, chol_with_jitter
from .errors import ParameterError

logger = logging.getLogger(__name__)

__all__ = [
    "LatentObservations",
    "LatentPosterior",
    "condition",
    "log_marginal",
    "sample_posterior",
    "ExactBackend",
    "clamp_count",
    "reset_clamp_count",
]

# Number of predictive variances clamped up to zero since the last reset;
# nonzero values indicate near-interpolation cancellation.
_CLAMP_COUNT = 0


def clamp_count():
    return _CLAMP_COUNT


def reset_clamp_count():
    global _CLAMP_COUNT
    _CLAMP_COUNT = 0


@dataclass(frozen=True)
class LatentObservations:
    """Observations for one latent process.

    ``noise_variance`` is the projected-noise variance: a scalar for fully
    observed data, or one value per observation when the projection varies
    across time stamps (missing-data blocks).
    """

    times: np.ndarray
    values: np.ndarray
    noise_variance: object  # float or (n,) array

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if times.shape != values.shape:
            raise ParameterError(
                f"times and values must have equal length, got {times.shape} vs {values.shape}"
            )
        noise = np.asarray(self.noise_variance, dtype=float)
        if noise.ndim == 0:
            noise = float(noise)
            if noise <= 0.0:
                raise ParameterError("noise_variance must be positive")
        else:
            if noise.shape != times.shape:
                raise ParameterError("per-observation noise must match times in length")
            if np.any(noise <= 0.0):
                raise ParameterError("noise_variance must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "noise_variance", noise)

    @property
    def n(self):
        return self.times.size

    def noise_diagonal(self):
        return np.broadcast_to(np.asarray(self.noise_variance, dtype=float), self.times.shape)


@dataclass(frozen=True)
class LatentPosterior:
    """Marginal posterior at query points plus the conditioning-data lml."""

    predictive_mean: np.ndarray
    predictive_variance: np.ndarray
    lml: float


def _noisy_factor(spec, obs):
    """Cholesky of k(X, X) + diag(noise) and the weight vector alpha."""
    K = kernels.kernel_values(spec, obs.times)
    A = K + np.diag(obs.noise_diagonal())
    L, _ = chol_with_jitter(A)
    alpha = chol_solve(L, obs.values)
    return L, alpha


def _lml_from_factor(L, alpha, values):
    n = values.size
    return -0.5 * float(values @ alpha) - 0.5 * chol_logdet(L) - 0.5 * n * LOG_2PI


def condition(spec, obs, query_times):
    """Exact GP posterior marginals at ``query_times``.

    With no observations this returns the prior (zero mean, ``k(t, t)``
    variance) and an lml of 0.  Predictive variances are clamped at zero
    from below; clamps are counted in :func:`clamp_count`.
    """
    query_times = np.atleast_1d(np.asarray(query_times, dtype=float))
    prior_var = np.array([kernels.eval_kernel(spec, t, t) for t in query_times])
    if obs.n == 0:
        return LatentPosterior(
            predictive_mean=np.zeros(query_times.size),
            predictive_variance=prior_var,
            lml=0.0,
        )
    L, alpha = _noisy_factor(spec, obs)
    K_star = kernels.kernel_values(spec, obs.times, query_times)
    mean = K_star.T @ alpha
    V = solve_triangular(L, K_star, lower=True)
    var = prior_var - np.einsum("ij,ij->j", V, V)
    neg = var < 0.0
    if np.any(neg):
        global _CLAMP_COUNT
        _CLAMP_COUNT += int(np.count_nonzero(neg))
        logger.debug("clamped %d negative predictive variances", int(np.count_nonzero(neg)))
        var = np.where(neg, 0.0, var)
    return LatentPosterior(
        predictive_mean=mean,
        predictive_variance=var,
        lml=_lml_from_factor(L, alpha, obs.values),
    )


def log_marginal(spec, obs):
    """log N(values | 0, K + diag(noise)); agrees with ``condition().lml``."""
    if obs.n == 0:
        return 0.0
    L, alpha = _noisy_factor(spec, obs)
    return _lml_from_factor(L, alpha, obs.values)


def sample_posterior(spec, obs, query_times, seed, n_draws=None):
    """Joint posterior draw(s) at ``query_times``, deterministic per seed.

    Returns a vector of length ``q`` (default), or an ``(n_draws, q)`` array
    when ``n_draws`` is given.
    """
    query_times = np.atleast_1d(np.asarray(query_times, dtype=float))
    q = query_times.size
    K_qq = kernels.kernel_values(spec, query_times)
    if obs.n == 0:
        mean = np.zeros(q)
        cov = K_qq
    else:
        L, alpha = _noisy_factor(spec, obs)
        K_star = kernels.kernel_values(spec, obs.times, query_times)
        mean = K_star.T @ alpha
        V = solve_triangular(L, K_star, lower=True)
        cov = K_qq - V.T @ V
    # The posterior covariance can be numerically rank deficient near
    # interpolation; factor through clamped eigenvalues.
    w, Q = np.linalg.eigh(0.5 * (cov + cov.T))
    root = Q * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    size = 1 if n_draws is None else int(n_draws)
    z = rng.standard_normal((size, q))
    draws = mean + z @ root.T
    return draws[0] if n_draws is None else draws


class ExactBackend:
    """Exact latent solver: the default backend behind the model's per-latent
    conditioning, marginal likelihood and sampling steps."""

    @staticmethod
    def condition(spec, obs, query_times):
        return condition(spec, obs, query_times)

    @staticmethod
    def log_marginal(spec, obs):
        return log_marginal(spec, obs)

    @staticmethod
    def sample_posterior(spec, obs, query_times, seed, n_draws=None):
        return sample_posterior(spec, obs, query_times, seed, n_draws)


EXACT = ExactBackend()
