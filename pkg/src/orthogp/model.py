"""The orthogonal mixing model: p outputs driven by m independent latent GPs.

A model is a basis ``H = U sqrt(S)``, a noise model ``sigma2 I + H D H'``
(or the whitened per-output variant) and one unit-variance kernel per latent
process.  Because the projected noise is diagonal, evidence, prediction and
sampling all decompose into independent single-output GP problems plus cheap
reconstruction, with per-column corrections for what the projection discards.

Latent kernels are rescaled to unit stationary variance at construction; the
diagonal ``S`` carries all output scale, which removes the scale degeneracy
between the two.

Everything here is pure and operates on immutable inputs; per-latent work may
safely run concurrently, and sampling derives one seed per latent from
``(seed, latent index)`` so any execution order gives identical output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import gp, kernels, mixing
from .errors import ParameterError

logger = logging.getLogger(__name__)

__all__ = [
    "OrthogonalModel",
    "LmlBreakdown",
    "JointPrediction",
    "log_likelihood",
    "predict",
    "sample",
    "mse_decompose",
    "projection_loss",
    "simulate",
]


@dataclass(frozen=True)
class OrthogonalModel:
    """Basis + noise + latent kernels; kernels are unit-normalized."""

    basis: mixing.OrthogonalBasis
    noise: mixing.NoiseModel
    latent_kernels: tuple

    def __post_init__(self):
        specs = tuple(self.latent_kernels)
        if len(specs) != self.basis.m:
            raise ParameterError(
                f"{len(specs)} latent kernels for {self.basis.m} basis columns"
            )
        if self.noise.heterogeneous is not None and self.noise.heterogeneous.shape != (self.basis.p,):
            raise ParameterError("heterogeneous variances must have one entry per output")
        self.noise.D_vector(self.basis.m)  # shape check
        object.__setattr__(
            self, "latent_kernels", tuple(kernels.normalize_unit_variance(s) for s in specs)
        )

    @property
    def p(self):
        return self.basis.p

    @property
    def m(self):
        return self.basis.m

    def effective_H(self):
        """Mixing matrix including the heterogeneous whitening factor."""
        H = self.basis.H
        if self.noise.heterogeneous is not None:
            H = np.sqrt(self.noise.heterogeneous)[:, None] * H
        return H

    def observation_noise_diag(self):
        """Per-output observation-noise variances diag(Sigma)."""
        if self.noise.heterogeneous is not None:
            return self.noise.sigma2 * self.noise.heterogeneous
        H = self.basis.H
        return self.noise.sigma2 + (H * H) @ self.noise.D_vector(self.m)


@dataclass(frozen=True)
class LmlBreakdown:
    """Evidence split into the projection corrections and per-latent terms.

    ``total = regulariser + sum(per_latent_lml)`` with the sum accumulated
    in latent-index order after the regulariser.  ``noise_lost`` and
    ``data_lost`` are the two correction penalties aggregated over columns.
    """

    regulariser: float
    per_latent_lml: tuple
    total: float
    noise_lost: float
    data_lost: float


@dataclass(frozen=True)
class JointPrediction:
    """Marginal predictions for the outputs plus the per-latent posteriors."""

    mean: np.ndarray  # p x q
    variance: np.ndarray  # p x q
    latent: tuple  # m LatentPosterior records


@dataclass(frozen=True)
class _ProjectedData:
    times: np.ndarray  # retained columns, original order
    values: np.ndarray  # m x n_retained
    noise: np.ndarray  # m x n_retained projected-noise variances
    reg_log2pi: float
    noise_lost: float
    data_lost: float


def _whitened_Y(model, Y):
    if model.noise.heterogeneous is None:
        return Y
    return Y / np.sqrt(model.noise.heterogeneous)[:, None]


def _project_dataset(model, dataset):
    """Project a dataset block by block into per-latent observations and
    accumulate the likelihood-correction pieces."""
    basis, noise = model.basis, model.noise
    p, m = model.p, model.m
    sigma2 = noise.sigma2
    het = noise.heterogeneous
    reduced_noise = mixing.NoiseModel(sigma2=sigma2, D=noise.D_vector(m))
    Yw = _whitened_Y(model, dataset.Y)

    kept_cols = []
    values_parts = []
    noise_parts = []
    reg_log2pi = 0.0
    noise_lost = 0.0
    data_lost = 0.0
    for block in mixing.partition_blocks(dataset):
        if block.degenerate:
            logger.warning(
                "dropping %d column(s) with no observed outputs", block.columns.size
            )
            continue
        n_b = block.columns.size
        p_b = block.observed.size
        Y_block = np.where(dataset.mask[:, block.columns], Yw[:, block.columns], 0.0)
        projected, proj = mixing.project_block(basis, reduced_noise, block.observed, Y_block)
        kept_cols.append(block.columns)
        values_parts.append(projected)
        noise_parts.append(np.repeat(proj.sigma_t[:, None], n_b, axis=1))

        ctx = proj.correction
        reg_log2pi += 0.5 * n_b * (p_b - m) * math.log(2.0 * math.pi)
        nl = 0.5 * n_b * ((p_b - m) * math.log(sigma2) + ctx.log_det_S + ctx.log_det_gram)
        if het is not None:
            nl += 0.5 * n_b * float(np.sum(np.log(het[block.observed])))
        noise_lost += nl
        W_o = Y_block[block.observed, :]
        total_sq = float(np.sum(W_o**2))
        if ctx.log_det_gram == 0.0 and p_b == p:
            captured_sq = float(np.sum((basis.U.T @ W_o) ** 2))
        else:
            U_o, L = mixing._observed_gram(basis, block.observed)
            from scipy.linalg import solve_triangular

            captured_sq = float(np.sum(solve_triangular(L, U_o.T @ W_o, lower=True) ** 2))
        data_lost += (total_sq - captured_sq) / (2.0 * sigma2)

    if kept_cols:
        cols = np.concatenate(kept_cols)
        order = np.argsort(cols, kind="stable")
        times = dataset.times[cols[order]]
        values = np.concatenate(values_parts, axis=1)[:, order]
        noise_mat = np.concatenate(noise_parts, axis=1)[:, order]
    else:
        times = np.zeros(0)
        values = np.zeros((m, 0))
        noise_mat = np.zeros((m, 0))
    return _ProjectedData(
        times=times,
        values=values,
        noise=noise_mat,
        reg_log2pi=reg_log2pi,
        noise_lost=noise_lost,
        data_lost=data_lost,
    )


def _latent_observations(model, projected, i):
    noise = projected.noise[i, :]
    if noise.size and np.all(noise == noise[0]):
        noise = float(noise[0])
    elif noise.size == 0:
        noise = 1.0  # unused with zero observations
    return gp.LatentObservations(
        times=projected.times, values=projected.values[i, :], noise_variance=noise
    )


def _check_shapes(model, dataset):
    if dataset.p != model.p:
        raise ParameterError(
            f"dataset has {dataset.p} outputs but the model has {model.p}"
        )


def log_likelihood(model, dataset, backend=gp.EXACT):
    """Evidence of the observed data under the model.

    Exact for fully observed data; with missing entries the projected noise
    uses the per-block diagonal approximation.  Columns with no observed
    outputs are dropped with a warning.
    """
    _check_shapes(model, dataset)
    projected = _project_dataset(model, dataset)
    regulariser = -projected.reg_log2pi - projected.noise_lost - projected.data_lost
    per_latent = tuple(
        backend.log_marginal(model.latent_kernels[i], _latent_observations(model, projected, i))
        for i in range(model.m)
    )
    total = regulariser
    for value in per_latent:
        total = total + value
    return LmlBreakdown(
        regulariser=regulariser,
        per_latent_lml=per_latent,
        total=total,
        noise_lost=projected.noise_lost,
        data_lost=projected.data_lost,
    )


def predict(model, dataset, query_times, include_observation_noise=False, backend=gp.EXACT):
    """Posterior marginals of the noise-free outputs at ``query_times``.

    Each latent process is conditioned independently on its projected
    observations; the output mean is ``H mu`` and the marginal variance is
    ``(H o H) nu`` (Hadamard square), plus ``diag(Sigma)`` per output when
    ``include_observation_noise`` is set.
    """
    _check_shapes(model, dataset)
    query_times = np.atleast_1d(np.asarray(query_times, dtype=float))
    projected = _project_dataset(model, dataset)
    posteriors = tuple(
        backend.condition(
            model.latent_kernels[i], _latent_observations(model, projected, i), query_times
        )
        for i in range(model.m)
    )
    mu = np.vstack([post.predictive_mean for post in posteriors])
    nu = np.vstack([post.predictive_variance for post in posteriors])
    H = model.effective_H()
    mean = H @ mu
    variance = (H * H) @ nu
    if include_observation_noise:
        variance = variance + model.observation_noise_diag()[:, None]
    return JointPrediction(mean=mean, variance=variance, latent=posteriors)


def sample(model, dataset, query_times, seed, n_draws=None, backend=gp.EXACT):
    """Joint posterior sample of the noise-free outputs at ``query_times``.

    Latent processes are sampled independently, each from a seed derived from
    ``(seed, latent index)``, then mixed through ``H``.  Returns a ``p x q``
    matrix, or ``(n_draws, p, q)`` when ``n_draws`` is given.
    """
    _check_shapes(model, dataset)
    query_times = np.atleast_1d(np.asarray(query_times, dtype=float))
    projected = _project_dataset(model, dataset)
    size = 1 if n_draws is None else int(n_draws)
    draws = np.empty((size, model.m, query_times.size))
    for i in range(model.m):
        latent_seed = np.random.SeedSequence(entropy=(int(seed), i))
        draws[:, i, :] = backend.sample_posterior(
            model.latent_kernels[i],
            _latent_observations(model, projected, i),
            query_times,
            latent_seed,
            n_draws=size,
        )
    H = model.effective_H()
    out = np.einsum("pk,dkq->dpq", H, draws)
    return out[0] if n_draws is None else out


def mse_decompose(basis, y, x):
    """Split ``||y - H x||^2`` into basis-orthogonal and per-latent parts.

    Returns ``(total, unexplained, per_latent)`` with
    ``total = unexplained + sum(per_latent)``: the unexplained part is the
    energy of ``y`` outside the basis column space, and latent ``i``
    contributes ``S_ii ((T y)_i - x_i)^2``.
    """
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if y.shape != (basis.p,) or x.shape != (basis.m,):
        raise ParameterError("y must have p entries and x must have m entries")
    total = float(np.sum((y - basis.H @ x) ** 2))
    coeffs = basis.U.T @ y
    unexplained = float(np.sum(y**2) - np.sum(coeffs**2))
    t_y = coeffs / np.sqrt(basis.S)
    per_latent = basis.S * (t_y - x) ** 2
    return total, unexplained, per_latent


def projection_loss(basis, noise, y):
    """The two per-observation penalties for what the projection discards.

    Returns ``(noise_lost, data_lost)``; together with
    ``-(p - m)/2 log(2 pi)`` they equal the log-density ratio between the
    full observation and its projection under the prior.
    """
    y = np.asarray(y, dtype=float).ravel()
    p, m = basis.p, basis.m
    sigma2 = noise.sigma2
    noise_lost = 0.5 * ((p - m) * math.log(sigma2) + float(np.sum(np.log(basis.S))))
    w = y
    if noise.heterogeneous is not None:
        noise_lost += 0.5 * float(np.sum(np.log(noise.heterogeneous)))
        w = y / np.sqrt(noise.heterogeneous)
    residual_sq = float(np.sum(w**2) - np.sum((basis.U.T @ w) ** 2))
    data_lost = residual_sq / (2.0 * sigma2)
    return noise_lost, data_lost


def simulate(model, times, seed):
    """Draw one dataset from the generative model: latent GP paths mixed
    through ``H`` plus observation noise."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    n = times.size
    # Noise uses stream (seed, m); latent i uses (seed, i), so streams never
    # collide and per-latent parallel sampling stays reproducible.
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), model.m)))
    X = np.empty((model.m, n))
    empty = gp.LatentObservations(times=np.zeros(0), values=np.zeros(0), noise_variance=1.0)
    for i in range(model.m):
        X[i, :] = gp.sample_posterior(
            model.latent_kernels[i], empty, times, np.random.SeedSequence(entropy=(int(seed), i))
        )
    F = model.effective_H() @ X
    if model.noise.heterogeneous is not None:
        noise_std = np.sqrt(model.noise.sigma2 * model.noise.heterogeneous)[:, None]
        Y = F + noise_std * rng.standard_normal((model.p, n))
    else:
        D = model.noise.D_vector(model.m)
        eps_latent = np.sqrt(D)[:, None] * rng.standard_normal((model.m, n))
        eps = math.sqrt(model.noise.sigma2) * rng.standard_normal((model.p, n))
        Y = F + model.basis.H @ eps_latent + eps
    return mixing.Dataset(times=times, Y=Y)
