"""Small shared linear-algebra helpers built on Cholesky factorizations.

No explicit matrix inverses anywhere; solves go through triangular factors.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ConditioningError

# Jitter escalation policy: relative to the mean diagonal, start small and
# multiply by 10 until the cap, then give up.
JITTER_START = 1e-10
JITTER_MAX = 1e-4
JITTER_FACTOR = 10.0

LOG_2PI = math.log(2.0 * math.pi)


def chol_with_jitter(A):
    """Cholesky factor of a symmetric PSD matrix, escalating diagonal jitter.

    Tries a plain factorization first; on failure adds ``jitter * mean(diag)``
    to the diagonal, with ``jitter`` escalating from ``JITTER_START`` to
    ``JITTER_MAX`` by factors of ``JITTER_FACTOR``.

    Returns
    -------
    (L, jitter) : (ndarray, float)
        Lower-triangular factor and the absolute jitter added to the
        diagonal (0.0 when none was needed).

    Raises
    ------
    ConditioningError
        If the factorization still fails at the maximum jitter.
    """
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return np.zeros((0, 0)), 0.0
    scale = float(np.mean(np.diagonal(A)))
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    if not (scale > 0.0) or not np.isfinite(scale):
        raise ConditioningError(
            "matrix is not positive definite and has a nonpositive mean diagonal"
        )
    rel = JITTER_START
    eye = np.eye(A.shape[0])
    while rel <= JITTER_MAX * (1.0 + 1e-12):
        jitter = rel * scale
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            rel *= JITTER_FACTOR
    raise ConditioningError(
        f"Cholesky failed after jitter escalation up to {JITTER_MAX * scale:.3e}"
    )


def chol_solve(L, B):
    """Solve ``A x = B`` given the lower Cholesky factor ``L`` of ``A``."""
    return cho_solve((L, True), B)


def chol_logdet(L):
    """log-determinant of ``A`` given its lower Cholesky factor."""
    return 2.0 * float(np.sum(np.log(np.diagonal(L))))


def mvn_logpdf(x, cov):
    """Log density of ``N(0, cov)`` at ``x`` (dense, Cholesky-based)."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n == 0:
        return 0.0
    L, _ = chol_with_jitter(np.asarray(cov, dtype=float))
    w = solve_triangular(L, x, lower=True)
    return -0.5 * float(w @ w) - 0.5 * chol_logdet(L) - 0.5 * n * LOG_2PI


def symmetrize(A):
    """Average a matrix with its transpose (removes roundoff asymmetry)."""
    return 0.5 * (A + A.T)
