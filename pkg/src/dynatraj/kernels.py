"""Ornstein-Uhlenbeck kernel, the composite marginal covariance, and
Cholesky-based positive-definite solves.

Every linear solve against a covariance matrix in the package goes through
:func:`pd_factor` so the jitter policy lives in one place.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import _backend
from .basis import BasisConfig, design_matrix
from .exceptions import NumericalError, ParameterError

# multiples of mean(diag K) tried in order after a plain factorization fails
JITTER_LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class OUParams:
    amplitude: float
    length_scale: float

    def __post_init__(self):
        if not (self.amplitude > 0 and self.length_scale > 0):
            raise ParameterError(
                f"OU amplitude and length scale must be positive, got {self.amplitude}, {self.length_scale}"
            )


@dataclass(frozen=True)
class NoiseParams:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ParameterError(f"noise variance must be positive, got {self.sigma2}")


def ou_kernel(p: OUParams, t1: float, t2: float) -> float:
    d = abs(float(t1) - float(t2))
    if d > 700.0 * p.length_scale:
        return 0.0
    return p.amplitude**2 * float(np.exp(-d / p.length_scale))


def ou_gram(p: OUParams, t1, t2) -> np.ndarray:
    t1 = np.ascontiguousarray(t1, dtype=np.float64).reshape(-1)
    t2 = np.ascontiguousarray(t2, dtype=np.float64).reshape(-1)
    return _backend.impl.ou_gram(t1, t2, p.amplitude**2, p.length_scale)


def check_covariance(S, name="Sigma_b") -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if S.shape[0] != S.shape[1]:
        raise ParameterError(f"{name} must be square, got shape {S.shape}")
    if not np.array_equal(S, S.T):
        raise ParameterError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ParameterError(f"{name} must be positive definite") from None
    return S


def composite_covariance(Sigma_b, basis_l: BasisConfig, ou: OUParams, noise: NoiseParams, times) -> np.ndarray:
    """``Phi_l Sigma_b Phi_l' + K_OU + sigma2 I`` on ``times``.

    The noise term is added per observation index, so repeated times are
    still distinct noisy measurements.
    """
    Sigma_b = check_covariance(Sigma_b)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    P = design_matrix(basis_l, times)
    if P.shape[1] != Sigma_b.shape[0]:
        raise ParameterError(f"Sigma_b is {Sigma_b.shape} but basis has dimension {P.shape[1]}")
    K = P @ Sigma_b @ P.T + ou_gram(ou, times, times)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += noise.sigma2
    return K


def cross_covariance(Sigma_b, basis_l: BasisConfig, ou: OUParams, t_query, t_obs) -> np.ndarray:
    """Covariance between latent values at ``t_query`` and observations at ``t_obs`` (no noise term)."""
    Pq = design_matrix(basis_l, t_query)
    Po = design_matrix(basis_l, t_obs)
    return Pq @ Sigma_b @ Po.T + ou_gram(ou, t_query, t_obs)


class PDFactor:
    """Lower Cholesky factor of a symmetric matrix plus the jitter it needed."""

    def __init__(self, L: np.ndarray, jitter: float = 0.0):
        self.L = L
        self.jitter = jitter

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def solve(self, B) -> np.ndarray:
        B = np.asarray(B, dtype=np.float64)
        if self.n == 0:
            return np.zeros_like(B)
        return cho_solve((self.L, True), B)

    def whiten(self, B) -> np.ndarray:
        """``L^{-1} B``."""
        B = np.asarray(B, dtype=np.float64)
        if self.n == 0:
            return np.zeros_like(B)
        return solve_triangular(self.L, B, lower=True)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def _try_cholesky(K):
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return None
    return L if np.all(np.isfinite(L)) else None


def pd_factor(K) -> PDFactor:
    K = np.asarray(K, dtype=np.float64)
    if K.shape[0] == 0:
        return PDFactor(np.zeros((0, 0)))
    L = _try_cholesky(K)
    if L is not None:
        return PDFactor(L)
    scale = float(np.mean(np.diag(K)))
    tried = []
    if np.isfinite(scale) and scale > 0:
        eye = np.eye(K.shape[0])
        for rung in JITTER_LADDER:
            tried.append(rung * scale)
            L = _try_cholesky(K + rung * scale * eye)
            if L is not None:
                return PDFactor(L, rung * scale)
    raise NumericalError(f"Cholesky failed after jitter ladder {tried}", ladder=tried)


def pd_solve(K, B) -> np.ndarray:
    return pd_factor(K).solve(B)


def pd_logdet(K) -> float:
    return pd_factor(K).logdet()


def gaussian_logpdf(y, mean, factor: PDFactor) -> float:
    r = factor.whiten(np.asarray(y, dtype=np.float64) - mean)
    n = factor.n
    return -0.5 * (n * np.log(2 * np.pi) + factor.logdet() + float(r @ r))


def ragged_whiten(times, offsets, Phi_l, Sigma_b, ou: OUParams, noise: NoiseParams, rhs):
    """Batched factor-and-whiten over individuals stored as contiguous row blocks.

    Returns ``(whitened_rhs, logdet, jitter)``; raises :class:`NumericalError`
    naming the block index of the first individual whose factorization failed.
    """
    out, logdet, jitter, status = _backend.impl.ragged_whiten(
        np.ascontiguousarray(times, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.intp),
        np.ascontiguousarray(Phi_l, dtype=np.float64),
        np.ascontiguousarray(Sigma_b, dtype=np.float64),
        float(ou.amplitude**2),
        float(ou.length_scale),
        float(noise.sigma2),
        np.ascontiguousarray(rhs, dtype=np.float64),
        np.asarray(JITTER_LADDER, dtype=np.float64),
    )
    failed = np.flatnonzero(status)
    if failed.size:
        raise NumericalError(
            f"Cholesky failed for block {int(failed[0])} after jitter ladder",
            ladder=JITTER_LADDER,
            individual=int(failed[0]),
        )
    return out, logdet, jitter
