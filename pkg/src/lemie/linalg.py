"""Small dense linear-algebra helpers shared by the samplers and combiners."""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from .errors import DecompositionError, LaplaceConstructionError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def cholesky_or_none(A: np.ndarray) -> Optional[np.ndarray]:
    """Lower Cholesky factor of the symmetrised matrix, or None if not PD."""
    try:
        return linalg.cholesky(symmetrize(A), lower=True)
    except linalg.LinAlgError:
        return None


def cholesky(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    L = cholesky_or_none(A)
    if L is None:
        raise DecompositionError(f"{what} is not positive definite")
    return L


def covariance_with_fallback(
    Sigma: np.ndarray, what: str = "covariance"
) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Return ``(Sigma, chol, fallback_used)``.

    A non-PD covariance is replaced by the diagonal matrix of its variances.
    Raises ``LaplaceConstructionError`` if even that is singular.
    """
    Sigma = symmetrize(np.atleast_2d(np.asarray(Sigma, dtype=float)))
    L = cholesky_or_none(Sigma)
    if L is not None:
        return Sigma, L, False
    variances = np.diag(Sigma).copy()
    if not np.all(variances > 0):
        raise LaplaceConstructionError(
            f"{what} has a zero-variance coordinate; diagonal fallback is singular"
        )
    logger.warning(f"⚠️  {what} is not positive definite, using its diagonal")
    D = np.diag(variances)
    return D, np.diag(np.sqrt(variances)), True


def precision_with_fallback(Sigma: np.ndarray, what: str = "covariance") -> Tuple[np.ndarray, bool]:
    _, L, fallback = covariance_with_fallback(Sigma, what)
    return chol_inverse(L), fallback


def chol_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of ``L @ L.T`` from its lower factor."""
    Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return Linv.T @ Linv


def chol_logdet(L: np.ndarray) -> float:
    return float(2.0 * np.sum(np.log(np.diag(L))))


def mvn_logpdf(x: np.ndarray, mu: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Normalised MVN log-density of the rows of ``x`` given the lower factor ``L``."""
    x = np.atleast_2d(x)
    z = linalg.solve_triangular(L, (x - mu).T, lower=True)
    p = L.shape[0]
    return -0.5 * (np.sum(z * z, axis=0) + p * LOG_2PI + chol_logdet(L))


def mvn_entropy(L: np.ndarray) -> float:
    """Differential entropy ``0.5 * log det(2 pi e Sigma)``."""
    p = L.shape[0]
    return 0.5 * (p * (LOG_2PI + 1.0) + chol_logdet(L))


def vech(Sigma: np.ndarray) -> np.ndarray:
    """Lower-triangular entries, row-major; works on stacks of matrices."""
    d = Sigma.shape[-1]
    rows, cols = np.tril_indices(d)
    return Sigma[..., rows, cols]


def unvech(v: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`vech`, returning symmetric matrices."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (d, d))
    rows, cols = np.tril_indices(d)
    out[..., rows, cols] = v
    out[..., cols, rows] = v
    return out


def vech_size(d: int) -> int:
    return d * (d + 1) // 2
