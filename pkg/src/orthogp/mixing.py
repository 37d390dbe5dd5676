"""Mixing bases, sufficient-statistic projections and projected noise.

An orthogonal basis ``H = U sqrt(S)`` (orthonormal ``U``, positive diagonal
``S``) makes the projected observation noise diagonal, which is what lets the
multi-output model decouple into independent single-output problems.  This
module builds those projections, the general (dense) projection used by the
reference paths, the missing-data variants with their diagonal approximation
and error bound, Kronecker-product bases, and eigendecomposition-based basis
construction.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from ._linalg import chol_logdet, chol_solve, chol_with_jitter, symmetrize
from .errors import ContractError, ObservabilityError, ParameterError, RankError

logger = logging.getLogger(__name__)

__all__ = [
    "OrthogonalBasis",
    "GeneralBasis",
    "NoiseModel",
    "Projection",
    "Dataset",
    "Block",
    "build_projection",
    "build_general_projection",
    "project",
    "partition_blocks",
    "project_block",
    "diag_approx_error",
    "kron_basis",
    "basis_from_kernel_matrix",
    "basis_from_data",
    "whiten_basis",
    "check_decoupling",
]

ORTHONORMALITY_TOL = 1e-10
EIGEN_FLOOR_REL = 1e-12


@dataclass(frozen=True)
class OrthogonalBasis:
    """Mixing basis ``H = U sqrt(S)`` with orthonormal columns in ``U``."""

    U: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        S = np.atleast_1d(np.asarray(self.S, dtype=float))
        if U.ndim != 2:
            raise ParameterError("U must be a p x m matrix")
        p, m = U.shape
        if m > p:
            raise ParameterError(f"need m <= p, got m={m} > p={p}")
        if S.shape != (m,):
            raise ParameterError(f"S must have one entry per basis column, got {S.shape}")
        if np.any(S <= 0.0):
            raise ParameterError("S entries must be strictly positive")
        gram_err = np.linalg.norm(U.T @ U - np.eye(m))
        if gram_err > ORTHONORMALITY_TOL:
            raise ParameterError(f"U columns are not orthonormal (||U'U - I||_F = {gram_err:.2e})")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "S", S)

    @property
    def p(self):
        return self.U.shape[0]

    @property
    def m(self):
        return self.U.shape[1]

    @property
    def H(self):
        return self.U * np.sqrt(self.S)


@dataclass(frozen=True)
class GeneralBasis:
    """Unconstrained mixing basis; columns must be linearly independent."""

    H: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2:
            raise ParameterError("H must be a p x m matrix")
        p, m = H.shape
        if m > p:
            raise ParameterError(f"need m <= p, got m={m} > p={p}")
        R = np.linalg.qr(H, mode="r")
        diag = np.abs(np.diagonal(R))
        if m and (diag.min() <= 1e-12 * max(diag.max(), 1e-300)):
            raise RankError("basis columns are numerically linearly dependent")
        object.__setattr__(self, "H", H)

    @property
    def p(self):
        return self.H.shape[0]

    @property
    def m(self):
        return self.H.shape[1]


@dataclass(frozen=True)
class NoiseModel:
    """Observation noise ``sigma2 * I_p + H diag(D) H'``.

    ``heterogeneous``, when set, switches to per-output noise
    ``sigma2 * diag(heterogeneous)`` with the whitening construction of
    :func:`whiten_basis`; that variant requires ``D == 0``.
    """

    sigma2: float
    D: np.ndarray = None
    heterogeneous: np.ndarray = None

    def __post_init__(self):
        sigma2 = float(self.sigma2)
        if not sigma2 > 0.0:
            raise ParameterError("sigma2 must be positive")
        D = self.D
        if D is not None:
            D = np.atleast_1d(np.asarray(D, dtype=float))
            if np.any(D < 0.0):
                raise ParameterError("D entries must be nonnegative")
        het = self.heterogeneous
        if het is not None:
            het = np.atleast_1d(np.asarray(het, dtype=float))
            if np.any(het <= 0.0):
                raise ParameterError("heterogeneous variances must be positive")
            if D is not None and np.any(D != 0.0):
                raise ParameterError("heterogeneous noise requires D = 0")
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "heterogeneous", het)

    def D_vector(self, m):
        if self.D is None:
            return np.zeros(m)
        if self.D.shape != (m,):
            raise ParameterError(f"D must have {m} entries, got {self.D.shape}")
        return self.D

    def dense_sigma(self, basis):
        """Materialized p x p noise covariance (reference paths only)."""
        p = basis.p
        if self.heterogeneous is not None:
            return self.sigma2 * np.diag(self.heterogeneous)
        H = basis.H
        return self.sigma2 * np.eye(p) + (H * self.D_vector(basis.m)) @ H.T


@dataclass(frozen=True)
class CorrectionContext:
    """Quantities the likelihood corrections need alongside a projection."""

    log_det_S: float
    log_det_gram: float  # log |U_o' U_o|; 0.0 with nothing missing
    observed: np.ndarray  # indices of observed outputs


@dataclass(frozen=True)
class Projection:
    """Sufficient-statistic map ``T`` with its projected noise.

    ``sigma_t`` is a length-m vector when ``diagonal`` (the fast path) and an
    m x m matrix otherwise.
    """

    T: np.ndarray
    sigma_t: np.ndarray
    diagonal: bool
    correction: CorrectionContext = None

    @property
    def m(self):
        return self.T.shape[0]

    def sigma_t_matrix(self):
        return np.diag(self.sigma_t) if self.diagonal else self.sigma_t


@dataclass(frozen=True)
class Dataset:
    """Time stamps with a p x n observation matrix and per-cell mask."""

    times: np.ndarray
    Y: np.ndarray
    mask: np.ndarray = None  # True = observed

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2:
            raise ParameterError("Y must be a p x n matrix")
        if Y.shape[1] != times.size:
            raise ParameterError(
                f"Y has {Y.shape[1]} columns but there are {times.size} time stamps"
            )
        mask = self.mask
        if mask is None:
            mask = ~np.isnan(Y)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != Y.shape:
                raise ParameterError("mask must have the same shape as Y")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "mask", mask)

    @property
    def p(self):
        return self.Y.shape[0]

    @property
    def n(self):
        return self.Y.shape[1]

    @property
    def fully_observed(self):
        return bool(self.mask.all())


@dataclass(frozen=True)
class Block:
    """Columns sharing one observed-output pattern."""

    columns: np.ndarray
    observed: np.ndarray

    @property
    def degenerate(self):
        return self.observed.size == 0


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------


def build_projection(basis, noise):
    """Projection for a fully observed orthogonal-basis model.

    ``T = S^{-1/2} U'`` and the projected noise is the diagonal
    ``sigma2 / S + D``.  Heterogeneous noise must go through
    :func:`whiten_basis` instead.
    """
    if noise.heterogeneous is not None:
        raise ContractError("heterogeneous noise requires the whiten_basis construction")
    inv_sqrt_s = 1.0 / np.sqrt(basis.S)
    T = inv_sqrt_s[:, None] * basis.U.T
    sigma_t = noise.sigma2 / basis.S + noise.D_vector(basis.m)
    correction = CorrectionContext(
        log_det_S=float(np.sum(np.log(basis.S))),
        log_det_gram=0.0,
        observed=np.arange(basis.p),
    )
    return Projection(T=T, sigma_t=sigma_t, diagonal=True, correction=correction)


def build_general_projection(basis, Sigma):
    """Dense projection ``T = (H' Sigma^-1 H)^-1 H' Sigma^-1`` for any basis.

    Returns a dense projected noise ``(H' Sigma^-1 H)^-1``.  This is the
    reference construction used by the oracle paths and sufficiency tests.
    """
    H = basis.H if isinstance(basis, (GeneralBasis, OrthogonalBasis)) else np.asarray(basis)
    Sigma = np.asarray(Sigma, dtype=float)
    L_sigma, _ = chol_with_jitter(Sigma)
    A = chol_solve(L_sigma, H)  # Sigma^-1 H
    M = symmetrize(H.T @ A)  # H' Sigma^-1 H
    try:
        L_m = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise RankError("H' Sigma^-1 H is singular") from exc
    T = chol_solve(L_m, A.T)
    sigma_t = chol_solve(L_m, np.eye(M.shape[0]))
    correction = CorrectionContext(
        log_det_S=float("nan"),
        log_det_gram=0.0,
        observed=np.arange(H.shape[0]),
    )
    return Projection(T=T, sigma_t=symmetrize(sigma_t), diagonal=False, correction=correction)


def project(proj, dataset):
    """Apply a projection to a fully observed dataset: ``T @ Y``."""
    if not dataset.fully_observed:
        raise ContractError(
            "dataset has missing entries; partition into blocks and use project_block"
        )
    return proj.T @ dataset.Y


def partition_blocks(dataset):
    """Group columns by identical observed-output pattern.

    Every column lands in exactly one block; each block keeps its columns in
    original order (patterns are keyed by first appearance).  Columns with no
    observed outputs come back as degenerate blocks and contribute nothing
    downstream.
    """
    order = []
    groups = {}
    for j in range(dataset.n):
        key = dataset.mask[:, j].tobytes()
        if key not in groups:
            groups[key] = []
            order.append((key, np.flatnonzero(dataset.mask[:, j])))
        groups[key].append(j)
    return [
        Block(columns=np.asarray(groups[key], dtype=int), observed=observed)
        for key, observed in order
    ]


def _observed_gram(basis, observed):
    """Cholesky of ``U_o' U_o`` for the observed-output rows."""
    observed = np.asarray(observed, dtype=int)
    m = basis.m
    if observed.size < m:
        raise ObservabilityError(
            f"{observed.size} observed outputs cannot identify {m} latent processes"
        )
    U_o = basis.U[observed, :]
    gram = symmetrize(U_o.T @ U_o)
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise ObservabilityError("U_o' U_o is singular for this missing pattern") from exc
    return U_o, L


def project_block(basis, noise, observed, Y_block):
    """Project one missing-data block and build its (approximate) projection.

    ``Y_block`` holds full p-row columns; only the rows in ``observed`` are
    used.  The projection is ``T_o = S^{-1/2} (U_o' U_o)^{-1} U_o'`` applied
    to the observed rows, and the projected noise is the diagonal
    approximation ``sigma2 * S^{-1/2} d[(U_o' U_o)^{-1}] S^{-1/2} + D``.

    With nothing missing this reduces exactly to
    :func:`build_projection` / :func:`project`.
    """
    if noise.heterogeneous is not None:
        raise ContractError("heterogeneous noise requires the whiten_basis construction")
    observed = np.asarray(observed, dtype=int)
    Y_block = np.asarray(Y_block, dtype=float)
    if observed.size == basis.p and np.array_equal(observed, np.arange(basis.p)):
        proj = build_projection(basis, noise)
        return proj.T @ Y_block, proj
    U_o, L = _observed_gram(basis, observed)
    inv_sqrt_s = 1.0 / np.sqrt(basis.S)
    # T_o = S^{-1/2} (U_o'U_o)^{-1} U_o'
    T_o = inv_sqrt_s[:, None] * chol_solve(L, U_o.T)
    projected = T_o @ Y_block[observed, :]
    L_inv = solve_triangular(L, np.eye(basis.m), lower=True)
    gram_inv_diag = np.einsum("ij,ij->j", L_inv, L_inv)  # d[(U_o'U_o)^{-1}]
    sigma_t = noise.sigma2 * gram_inv_diag / basis.S + noise.D_vector(basis.m)
    correction = CorrectionContext(
        log_det_S=float(np.sum(np.log(basis.S))),
        log_det_gram=chol_logdet(L),
        observed=observed,
    )
    proj = Projection(T=T_o, sigma_t=sigma_t, diagonal=True, correction=correction)
    return projected, proj


def dense_block_sigma_t(basis, noise, observed):
    """Dense (unapproximated) projected noise for a missing-data block."""
    observed = np.asarray(observed, dtype=int)
    _, L = _observed_gram(basis, observed)
    inv_sqrt_s = 1.0 / np.sqrt(basis.S)
    gram_inv = chol_solve(L, np.eye(basis.m))
    sigma_t = noise.sigma2 * (inv_sqrt_s[:, None] * gram_inv * inv_sqrt_s[None, :])
    return symmetrize(sigma_t + np.diag(noise.D_vector(basis.m)))


def diag_approx_error(basis, noise, observed):
    """Measured relative error of the diagonal projected-noise approximation
    together with its proven bound.

    Returns ``(eps_rel, bound)`` where ``eps_rel`` is the operator-norm error
    ``||Sigma_To - d[Sigma_To]|| / ||d[Sigma_To]||`` and ``bound`` is
    ``(S_max / S_min) * lambda_max(U_m' U_m)`` over the missing rows.
    ``eps_rel <= bound`` always holds.
    """
    observed = np.asarray(observed, dtype=int)
    sigma_t = dense_block_sigma_t(basis, noise, observed)
    d = np.diagonal(sigma_t)
    off = sigma_t - np.diag(d)
    denom = float(np.max(np.abs(d)))
    eps_rel = float(np.max(np.abs(np.linalg.eigvalsh(off)))) / denom
    missing = np.setdiff1d(np.arange(basis.p), observed)
    if missing.size == 0:
        lam = 0.0
    else:
        U_m = basis.U[missing, :]
        lam = float(np.max(np.linalg.eigvalsh(symmetrize(U_m.T @ U_m))))
    bound = float(np.max(basis.S) / np.min(basis.S)) * lam
    return eps_rel, bound


# ---------------------------------------------------------------------------
# Basis construction
# ---------------------------------------------------------------------------


def kron_basis(parts):
    """Kronecker-product basis from per-factor orthogonal bases.

    The resulting projection and projected noise equal the Kronecker products
    of the per-factor projections and projected noises.
    """
    parts = list(parts)
    if not parts:
        raise ParameterError("kron_basis needs at least one factor")
    U = parts[0].U
    S = parts[0].S
    for b in parts[1:]:
        U = np.kron(U, b.U)
        S = np.kron(S, b.S)
    return OrthogonalBasis(U=U, S=S)


def _fix_eigvector_signs(U):
    # Deterministic convention: the largest-magnitude entry of each column is
    # positive; argmax breaks ties at the lowest index.
    for j in range(U.shape[1]):
        i = int(np.argmax(np.abs(U[:, j])))
        if U[i, j] < 0:
            U[:, j] = -U[:, j]
    return U


def basis_from_kernel_matrix(K_r, m):
    """Top-``m`` eigenpairs of a PSD matrix as an orthogonal basis.

    Eigenvalues come back in descending order in ``S``; eigenvector signs
    follow a deterministic convention so repeated runs agree.  The m-th
    eigenvalue must clear a floor of ``1e-12 x`` the largest one.
    """
    K_r = symmetrize(np.asarray(K_r, dtype=float))
    p = K_r.shape[0]
    if not 1 <= m <= p:
        raise ParameterError(f"need 1 <= m <= p, got m={m}, p={p}")
    w, V = np.linalg.eigh(K_r)
    w = w[::-1]
    V = V[:, ::-1]
    floor = EIGEN_FLOOR_REL * max(w[0], 0.0)
    if w[m - 1] <= floor:
        raise RankError(
            f"eigenvalue {m} of the basis matrix ({w[m - 1]:.3e}) is below the truncation floor"
        )
    U = _fix_eigvector_signs(V[:, :m].copy())
    return OrthogonalBasis(U=U, S=w[:m].copy())


def basis_from_data(dataset, m):
    """Basis initialisation from the empirical spatial covariance ``Y Y'/n``.

    Requires a fully observed dataset; with missing data, subset to complete
    columns first.
    """
    if not dataset.fully_observed:
        raise ContractError(
            "basis_from_data needs complete columns; subset the dataset first"
        )
    if dataset.n == 0:
        raise ParameterError("cannot initialise a basis from an empty dataset")
    K_hat = (dataset.Y @ dataset.Y.T) / dataset.n
    return basis_from_kernel_matrix(K_hat, m)


def whiten_basis(per_output_variances, U, S, sigma2=1.0):
    """Heterogeneous-noise basis ``H = diag(sqrt(v)) U sqrt(S)``.

    Under noise ``sigma2 * diag(v)`` this basis keeps the projected noise
    diagonal (``sigma2 / S``): the projection whitens the data by
    ``diag(1/sqrt(v))`` before the orthogonal projection.  Requires ``D = 0``.

    Returns ``(GeneralBasis, Projection)``.
    """
    v = np.atleast_1d(np.asarray(per_output_variances, dtype=float))
    if np.any(v <= 0.0):
        raise ParameterError("per-output variances must be positive")
    base = OrthogonalBasis(U=U, S=S)
    if v.shape != (base.p,):
        raise ParameterError(f"need one variance per output, got {v.shape}")
    H = (np.sqrt(v)[:, None] * base.U) * np.sqrt(base.S)
    inv_sqrt_s = 1.0 / np.sqrt(base.S)
    T = (inv_sqrt_s[:, None] * base.U.T) / np.sqrt(v)[None, :]
    sigma_t = float(sigma2) / base.S
    correction = CorrectionContext(
        log_det_S=float(np.sum(np.log(base.S))),
        log_det_gram=0.0,
        observed=np.arange(base.p),
    )
    return (
        GeneralBasis(H=H),
        Projection(T=T, sigma_t=sigma_t, diagonal=True, correction=correction),
    )


def check_decoupling(basis, Sigma, tol=1e-10):
    """Whether the projected noise for ``(H, Sigma)`` is diagonal.

    Returns ``(decoupled, off_diag_ratio)`` where the ratio is the Frobenius
    norm of the off-diagonal part of ``(H' Sigma^-1 H)^-1`` relative to its
    diagonal part.
    """
    proj = build_general_projection(basis, Sigma)
    sigma_t = proj.sigma_t_matrix()
    d = np.diag(np.diagonal(sigma_t))
    ratio = float(np.linalg.norm(sigma_t - d) / np.linalg.norm(d))
    return ratio < tol, ratio
