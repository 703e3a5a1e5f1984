"""Pure numpy/scipy implementations of the kernels in ``_core``.

Same signatures and numerical policy as the compiled versions; selected
automatically when the extension is not built.
"""
import numpy as np
from scipy.linalg import solve_triangular


def bspline_design(knots, degree, t):
    knots = np.asarray(knots, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n_basis = knots.shape[0] - degree - 1
    out = np.zeros((t.shape[0], n_basis))
    if t.shape[0] == 0:
        return out
    span = np.searchsorted(knots, t, side="right") - 1
    span = np.clip(span, degree, n_basis - 1)

    N = np.zeros((t.shape[0], degree + 1))
    N[:, 0] = 1.0
    left = np.zeros((t.shape[0], degree + 1))
    right = np.zeros((t.shape[0], degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(t.shape[0])
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    rows = np.arange(t.shape[0])[:, None]
    cols = span[:, None] - degree + np.arange(degree + 1)[None, :]
    out[rows, cols] = N
    return out


def ou_gram(t1, t2, amp2, ell):
    d = np.abs(np.asarray(t1, dtype=np.float64)[:, None] - np.asarray(t2, dtype=np.float64)[None, :])
    out = amp2 * np.exp(-d / ell)
    out[d > 700.0 * ell] = 0.0
    return out


def _cholesky_lower(K):
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(L)):
        return None
    return L


def ragged_whiten(times, offsets, phil, sigma_b, amp2, ell, sigma2, rhs, ladder):
    m = offsets.shape[0] - 1
    out = np.zeros_like(rhs, dtype=np.float64)
    logdet = np.zeros(m)
    jitter = np.zeros(m)
    status = np.zeros(m, dtype=np.int64)
    for i in range(m):
        lo, hi = offsets[i], offsets[i + 1]
        if hi == lo:
            continue
        t = times[lo:hi]
        P = phil[lo:hi]
        K = P @ sigma_b @ P.T + ou_gram(t, t, amp2, ell)
        K = 0.5 * (K + K.T)
        K[np.diag_indices_from(K)] += sigma2
        L = _cholesky_lower(K)
        if L is None:
            scale = np.mean(np.diag(K))
            for rung in ladder:
                L = _cholesky_lower(K + rung * scale * np.eye(K.shape[0]))
                if L is not None:
                    jitter[i] = rung * scale
                    break
        if L is None:
            status[i] = 1
            continue
        logdet[i] = 2.0 * np.sum(np.log(np.diag(L)))
        out[lo:hi] = solve_triangular(L, rhs[lo:hi], lower=True)
    return out, logdet, jitter, status
