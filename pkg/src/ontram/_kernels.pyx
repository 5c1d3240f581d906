# cython: language_level=3
"""Compiled hot loops. Semantics must match ``ontram._fallback`` exactly."""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


cdef inline double _cdf(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


def nll_grad(const double[:, ::1] X, const cnp.int64_t[::1] y,
             const double[::1] theta, const double[::1] beta,
             eta, double floor, bint want_grad=True):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t P = X.shape[1]
    cdef Py_ssize_t J = theta.shape[0]
    cdef Py_ssize_t i, j
    cdef cnp.int64_t k
    cdef double s, a, b, p, fa, fb, da, db, gs, total = 0.0
    cdef double inv_n = 1.0 / n
    cdef bint has_upper, has_lower
    cdef const double[::1] eta_v
    cdef bint has_eta = eta is not None

    g_theta_arr = np.zeros(J, dtype=np.float64)
    g_beta_arr = np.zeros(P, dtype=np.float64)
    g_shift_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] g_theta = g_theta_arr
    cdef double[::1] g_beta = g_beta_arr
    cdef double[::1] g_shift = g_shift_arr
    if has_eta:
        eta_v = eta

    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(P):
                s = s + X[i, j] * beta[j]
            if has_eta:
                s = s + eta_v[i]
            k = y[i]
            has_upper = k < J
            has_lower = k > 0
            a = 0.0
            b = 0.0
            if has_upper:
                a = theta[k] - s
            if has_lower:
                b = theta[k - 1] - s
            if has_upper and has_lower:
                if b > 0:
                    p = _cdf(-b) - _cdf(-a)
                else:
                    p = _cdf(a) - _cdf(b)
            elif has_upper:
                p = _cdf(a)
            elif has_lower:
                p = _cdf(-b)
            else:
                p = 1.0
            if p < floor:
                total = total - log(floor)
                continue
            total = total - log(p)
            if not want_grad:
                continue
            da = 0.0
            db = 0.0
            if has_upper:
                fa = _cdf(a) * _cdf(-a)
                da = -fa / p
                g_theta[k] += da * inv_n
            if has_lower:
                fb = _cdf(b) * _cdf(-b)
                db = fb / p
                g_theta[k - 1] += db * inv_n
            gs = -(da + db) * inv_n
            g_shift[i] = gs
            for j in range(P):
                g_beta[j] += gs * X[i, j]

    return total * inv_n, g_theta_arr, g_beta_arr, g_shift_arr


def pair_concordance(const double[::1] pred, const double[::1] obs):
    cdef Py_ssize_t n = pred.shape[0]
    cdef Py_ssize_t i, j
    cdef double credit = 0.0
    cdef long long informative = 0
    cdef double dp, do
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                do = obs[i] - obs[j]
                if do == 0:
                    continue
                informative += 1
                dp = pred[i] - pred[j]
                if dp == 0:
                    credit += 0.5
                elif (dp > 0) == (do > 0):
                    credit += 1.0
    return credit, informative
