"""Special functions and matrix-expectation primitives used by the inference updates.

Everything here is a pure function over immutable inputs.  Symmetric
positive-definite matrices are plain ``float64`` ndarrays; validity is
enforced by the Cholesky-with-jitter policy of :func:`spd_cholesky` rather
than by a wrapper class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import digamma as _digamma

from .errors import NumericalError

# Relative diagonal jitter added when a Cholesky factorization fails; one
# retry only, then hard error.
_JITTER_SCALE = 1e-9


@dataclass(frozen=True)
class BetaParams:
    """Parameters (a, b) of a Beta distribution, both strictly positive."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Beta parameters must be positive, got ({self.a}, {self.b})")


@dataclass(frozen=True)
class InverseWishartParams:
    """Degrees of freedom and SPD scale matrix of an inverse-Wishart distribution."""

    dof: float
    scale: np.ndarray

    def __post_init__(self):
        dim = self.scale.shape[0]
        if self.scale.shape != (dim, dim):
            raise ValueError("scale must be square")
        if not self.dof > dim - 1:
            raise ValueError(f"dof must exceed dim-1, got dof={self.dof}, dim={dim}")


def digamma(x):
    """Digamma function psi(x) = d/dx ln Gamma(x) for x > 0.

    Accepts scalars or arrays; raises ``ValueError`` on any non-positive
    entry (the inference updates only ever need the positive axis).
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 0):
        raise ValueError("digamma requires strictly positive arguments")
    out = _digamma(arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def expected_log_beta_terms(p: BetaParams):
    """Expectations (E[ln v], E[ln(1-v)]) under v ~ Beta(a, b).

    Both include the psi(a+b) normalizer, i.e. E[ln v] = psi(a) - psi(a+b).
    """
    norm = _digamma(p.a + p.b)
    return float(_digamma(p.a) - norm), float(_digamma(p.b) - norm)


def iw_expectations(p: InverseWishartParams):
    """Expectations (E[S^-1], E[ln |S|]) under S ~ InverseWishart(dof, scale).

    Returns
    -------
    precision_mean : ndarray (D, D)
        E[S^-1] = dof * scale^-1, symmetrized.
    logdet_mean : float
        E[ln |S|] = ln |scale| - D ln 2 - sum_i psi((dof + 1 - i) / 2).
    """
    d = p.scale.shape[0]
    chol, logdet_scale = spd_cholesky(p.scale)
    precision = p.dof * cho_solve(chol, np.eye(d))
    precision = 0.5 * (precision + precision.T)
    logdet = logdet_scale - d * np.log(2.0) - float(
        np.sum(_digamma((p.dof + 1.0 - np.arange(1, d + 1)) / 2.0))
    )
    return precision, logdet


def spd_cholesky(a: np.ndarray):
    """Lower Cholesky factorization of an SPD matrix with one jitter retry.

    On failure the diagonal gets ``1e-9 * trace(a) / dim`` added once; a
    second failure raises :class:`NumericalError`.

    Returns
    -------
    (chol, lower) : tuple
        Factorization as accepted by ``scipy.linalg.cho_solve``.
    logdet : float
        ln |a| of the (possibly jittered) matrix.
    """
    try:
        c, low = cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        jitter = _JITTER_SCALE * np.trace(a) / a.shape[0]
        try:
            c, low = cho_factor(a + jitter * np.eye(a.shape[0]), lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("matrix is not positive definite even after jitter") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return (c, low), logdet


def spd_solve(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a @ x = rhs for SPD ``a`` via Cholesky (with the jitter policy)."""
    chol, _ = spd_cholesky(a)
    return cho_solve(chol, rhs)


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Symmetrized inverse of an SPD matrix."""
    inv = spd_solve(a, np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


def spd_logdet(a: np.ndarray) -> float:
    """ln |a| for SPD ``a``."""
    _, logdet = spd_cholesky(a)
    return logdet
