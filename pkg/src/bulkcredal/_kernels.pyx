# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled SAA and KL-dual kernels. Mirrors ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

cdef double _GOLD = 0.5 * (sqrt(5.0) - 1.0)


def newsvendor_losses(const double[::1] x, const double[:, ::1] S, double h, double b):
    cdef Py_ssize_t n = S.shape[0], d = S.shape[1], i, j
    cdef double acc, diff
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        acc = 0.0
        for j in range(d):
            diff = x[j] - S[i, j]
            if diff > 0:
                acc += h * diff
            else:
                acc -= b * diff
        o[i] = acc
    return out


def newsvendor_grad(const double[::1] x, const double[:, ::1] S, double h, double b,
                    const double[::1] weights):
    cdef Py_ssize_t n = S.shape[0], d = S.shape[1], i, j
    cdef double diff, w
    out = np.zeros(d)
    cdef double[::1] g = out
    for i in range(n):
        w = weights[i]
        for j in range(d):
            diff = x[j] - S[i, j]
            if diff > 0:
                g[j] += h * w
            elif diff < 0:
                g[j] -= b * w
    return out


def lad_grad(const double[::1] theta, const double[:, ::1] S, const double[::1] weights):
    cdef Py_ssize_t n = S.shape[0], p = S.shape[1], d = p - 1, i, j
    cdef double r, s
    out = np.zeros(p)
    cdef double[::1] g = out
    for i in range(n):
        r = S[i, d] - theta[d]
        for j in range(d):
            r -= S[i, j] * theta[j]
        if r > 0:
            s = weights[i]
        elif r < 0:
            s = -weights[i]
        else:
            continue
        for j in range(d):
            g[j] -= s * S[i, j]
        g[d] -= s
    return out


cdef double _kl_g(const double[::1] l, double M, double eps, double lam) nogil:
    cdef Py_ssize_t i, n = l.shape[0]
    cdef double z = 0.0
    for i in range(n):
        z += exp((l[i] - M) / lam)
    return lam * eps + M + lam * log(z / n)


def kl_dual_inner(losses, double eps, double lam_lo, double lam_hi, int iters=25):
    cdef const double[::1] l = np.ascontiguousarray(losses, dtype=np.float64)
    cdef Py_ssize_t n = l.shape[0], i
    cdef double M = l[0]
    cdef int k = 0, rep, it
    for i in range(n):
        if l[i] > M:
            M = l[i]
    for i in range(n):
        if l[i] == M:
            k += 1
    at_max = np.asarray(l) == M
    if eps >= log(<double>n / k):
        return M, 0.0, at_max / k

    cdef double lo = log(lam_lo), hi = log(lam_hi)
    cdef double a, c, x1, x2, f1, f2, u = 0.0, width
    for rep in range(60):
        a = lo
        c = hi
        x1 = c - _GOLD * (c - a)
        x2 = a + _GOLD * (c - a)
        f1 = _kl_g(l, M, eps, exp(x1))
        f2 = _kl_g(l, M, eps, exp(x2))
        for it in range(iters):
            if f1 <= f2:
                c = x2
                x2 = x1
                f2 = f1
                x1 = c - _GOLD * (c - a)
                f1 = _kl_g(l, M, eps, exp(x1))
            else:
                a = x1
                x1 = x2
                f1 = f2
                x2 = a + _GOLD * (c - a)
                f2 = _kl_g(l, M, eps, exp(x2))
        u = 0.5 * (a + c)
        width = hi - lo
        if u - lo < 1e-3 * width:
            lo -= log(10.0)
        elif hi - u < 1e-3 * width:
            hi += log(10.0)
        else:
            break

    cdef double lam = exp(u), best = _kl_g(l, M, eps, lam)
    cdef double s, zi, mean_w, var_w, grad, cand, val
    for rep in range(8):
        s = 0.0
        mean_w = 0.0
        for i in range(n):
            zi = exp((l[i] - M) / lam)
            s += zi
            mean_w += zi * l[i]
        mean_w /= s
        var_w = 0.0
        for i in range(n):
            zi = exp((l[i] - M) / lam)
            var_w += zi * (l[i] - mean_w) * (l[i] - mean_w)
        var_w /= s
        grad = eps + M / lam + log(s / n) - mean_w / lam
        if var_w <= 0.0:
            break
        cand = lam - grad * lam * lam * lam / var_w
        if cand <= 0.0:
            cand = 0.5 * lam
        val = _kl_g(l, M, eps, cand)
        if val < best:
            lam = cand
            best = val
        else:
            break
    if best >= M:
        return M, 0.0, at_max / k
    z = np.exp((np.asarray(l) - M) / lam)
    return best, lam, z / z.sum()
