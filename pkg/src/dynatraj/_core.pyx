# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Inputs are assumed validated by the Python wrappers in ``basis`` and
``kernels``; nothing here raises on bad domains.
"""
import numpy as np

from libc.math cimport exp, fabs, log, sqrt
from libc.stdlib cimport free, malloc


cdef inline Py_ssize_t _find_span(const double[::1] knots, Py_ssize_t n_basis,
                                  int degree, double t) noexcept nogil:
    cdef Py_ssize_t low, high, mid
    if t >= knots[n_basis]:
        return n_basis - 1
    if t <= knots[degree]:
        return degree
    low = degree
    high = n_basis
    mid = (low + high) // 2
    while t < knots[mid] or t >= knots[mid + 1]:
        if t < knots[mid]:
            high = mid
        else:
            low = mid
        mid = (low + high) // 2
    return mid


def bspline_design(const double[::1] knots, int degree, const double[::1] t):
    """Rows of nonzero B-spline values (Cox-de Boor triangle) for each time."""
    cdef Py_ssize_t n = t.shape[0]
    cdef Py_ssize_t n_basis = knots.shape[0] - degree - 1
    out = np.zeros((n, n_basis), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double *left = <double *> malloc((degree + 1) * sizeof(double))
    cdef double *right = <double *> malloc((degree + 1) * sizeof(double))
    cdef double *N = <double *> malloc((degree + 1) * sizeof(double))
    cdef Py_ssize_t i, span
    cdef int j, r
    cdef double x, saved, temp
    if left == NULL or right == NULL or N == NULL:
        free(left); free(right); free(N)
        raise MemoryError()
    with nogil:
        for i in range(n):
            x = t[i]
            span = _find_span(knots, n_basis, degree, x)
            N[0] = 1.0
            for j in range(1, degree + 1):
                left[j] = x - knots[span + 1 - j]
                right[j] = knots[span + j] - x
                saved = 0.0
                for r in range(j):
                    temp = N[r] / (right[r + 1] + left[j - r])
                    N[r] = saved + right[r + 1] * temp
                    saved = left[j - r] * temp
                N[j] = saved
            for j in range(degree + 1):
                o[i, span - degree + j] = N[j]
    free(left); free(right); free(N)
    return out


def ou_gram(const double[::1] t1, const double[::1] t2, double amp2, double ell):
    cdef Py_ssize_t n1 = t1.shape[0], n2 = t2.shape[0], i, j
    out = np.empty((n1, n2), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double d, cutoff = 700.0 * ell
    with nogil:
        for i in range(n1):
            for j in range(n2):
                d = fabs(t1[i] - t2[j])
                if d > cutoff:
                    o[i, j] = 0.0
                else:
                    o[i, j] = amp2 * exp(-d / ell)
    return out


cdef int _cholesky(double *K, Py_ssize_t n) noexcept nogil:
    """In-place lower Cholesky on a row-major n x n buffer; 0 on success."""
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(n):
        s = K[j * n + j]
        for k in range(j):
            s -= K[j * n + k] * K[j * n + k]
        if not (s > 0.0):
            return 1
        s = sqrt(s)
        K[j * n + j] = s
        for i in range(j + 1, n):
            for k in range(j):
                K[i * n + j] -= K[i * n + k] * K[j * n + k]
            K[i * n + j] /= s
    return 0


def ragged_whiten(const double[::1] times, const Py_ssize_t[::1] offsets,
                  const double[:, ::1] phil, const double[:, ::1] sigma_b,
                  double amp2, double ell, double sigma2,
                  const double[:, ::1] rhs, const double[::1] ladder):
    """Factor each individual's composite covariance and whiten its rows.

    For individual ``i`` owning rows ``offsets[i]:offsets[i+1]`` this builds
    ``K_i = Phi_l Sigma_b Phi_l' + K_OU + sigma2 I``, factors ``K_i = L L'``
    (retrying with ``ladder[k] * mean(diag K_i)`` added to the diagonal), and
    returns ``L^{-1} rhs_i``, ``log det K_i`` and the jitter used.
    ``status[i]`` is 1 when every rung of the ladder failed.
    """
    cdef Py_ssize_t m = offsets.shape[0] - 1
    cdef Py_ssize_t k = rhs.shape[1], dl = phil.shape[1], n_rungs = ladder.shape[0]
    cdef Py_ssize_t i, a, b, p, q, c, n, off, rung, max_n = 0
    for i in range(m):
        if offsets[i + 1] - offsets[i] > max_n:
            max_n = offsets[i + 1] - offsets[i]
    out = np.zeros((rhs.shape[0], k), dtype=np.float64)
    logdet = np.zeros(m, dtype=np.float64)
    jitter = np.zeros(m, dtype=np.float64)
    status = np.zeros(m, dtype=np.int64)
    cdef double[:, ::1] o = out
    cdef double[::1] ld = logdet
    cdef double[::1] jit = jitter
    cdef long long[::1] st = status
    cdef double *K = <double *> malloc((max_n * max_n + 1) * sizeof(double))
    cdef double *B = <double *> malloc((max_n * max_n + 1) * sizeof(double))
    cdef double s, d, mean_diag, cutoff = 700.0 * ell
    cdef int fail
    if K == NULL or B == NULL:
        free(K); free(B)
        raise MemoryError()
    with nogil:
        for i in range(m):
            off = offsets[i]
            n = offsets[i + 1] - off
            if n == 0:
                continue
            for a in range(n):
                for b in range(a + 1):
                    s = 0.0
                    for p in range(dl):
                        for q in range(dl):
                            s += phil[off + a, p] * sigma_b[p, q] * phil[off + b, q]
                    d = fabs(times[off + a] - times[off + b])
                    if d <= cutoff:
                        s += amp2 * exp(-d / ell)
                    if a == b:
                        s += sigma2
                    B[a * n + b] = s
                    B[b * n + a] = s
            mean_diag = 0.0
            for a in range(n):
                mean_diag += B[a * n + a]
            mean_diag /= n
            for a in range(n * n):
                K[a] = B[a]
            fail = _cholesky(K, n)
            rung = 0
            while fail and rung < n_rungs:
                for a in range(n * n):
                    K[a] = B[a]
                for a in range(n):
                    K[a * n + a] += ladder[rung] * mean_diag
                fail = _cholesky(K, n)
                if not fail:
                    jit[i] = ladder[rung] * mean_diag
                rung += 1
            if fail:
                st[i] = 1
                continue
            s = 0.0
            for a in range(n):
                s += log(K[a * n + a])
            ld[i] = 2.0 * s
            for c in range(k):
                for a in range(n):
                    s = rhs[off + a, c]
                    for b in range(a):
                        s -= K[a * n + b] * o[off + b, c]
                    o[off + a, c] = s / K[a * n + a]
    free(K); free(B)
    return out, logdet, jitter, status
