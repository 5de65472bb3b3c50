# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: keyed uniform stream, lasso coordinate descent,
and the tree split scan.  Mirrors ``_kernels_py`` exactly: the integer
generator is bit-identical, the float kernels follow the same operation
order.  See that module for the reference semantics."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, fabs

cnp.import_array()

ctypedef unsigned long long u64

BACKEND_NAME = "compiled"

cdef inline u64 _fin(u64 z) nogil:
    z = (z ^ (z >> 30)) * <u64>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <u64>0x94D049BB133111EBULL
    return z ^ (z >> 31)


def uniform_block(key, long long count):
    """Splitmix64 stream seeded at ``key``; bit-identical to the fallback."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    cdef u64 k = <u64>(int(key) & 0xFFFFFFFFFFFFFFFF)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(count, dtype=np.float64)
    cdef long long i
    cdef u64 z
    with nogil:
        for i in range(count):
            z = _fin(k + (<u64>(i + 1)) * <u64>0x9E3779B97F4A7C15ULL)
            out[i] = ((<double>(z >> 11)) + 0.5) * (2.0 ** -53)
    return out


def lasso_cd(object X_in, object y_in, object w_in, double lam, double tol, long long max_iter):
    """Cyclic coordinate descent with soft-thresholding; see fallback docs."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] X = np.ascontiguousarray(X_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef long long n = X.shape[0]
    cdef long long p = X.shape[1]
    cdef long long i, j, sweep
    cdef double sw = 0.0
    for i in range(n):
        sw += w[i]
    if sw <= 0.0:
        raise ValueError("weights must have positive sum")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] wX = np.empty((n, p), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] denom = np.zeros(p, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] beta = np.zeros(p, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] r = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] trace = np.empty(max_iter, dtype=np.float64)
    cdef double b0 = 0.0, db0, rho, bj, step, delta, obj, acc, dj
    cdef long long sweeps = 0
    cdef bint converged = False

    with nogil:
        for j in range(p):
            acc = 0.0
            for i in range(n):
                wX[i, j] = w[i] * X[i, j]
                acc += wX[i, j] * X[i, j]
            denom[j] = acc / sw
        acc = 0.0
        for i in range(n):
            acc += w[i] * y[i]
        b0 = acc / sw
        for i in range(n):
            r[i] = y[i] - b0
        for sweep in range(max_iter):
            sweeps = sweep + 1
            acc = 0.0
            for i in range(n):
                acc += w[i] * r[i]
            db0 = acc / sw
            b0 += db0
            for i in range(n):
                r[i] -= db0
            delta = fabs(db0)
            for j in range(p):
                dj = denom[j]
                if dj <= 0.0:
                    continue
                acc = 0.0
                for i in range(n):
                    acc += wX[i, j] * r[i]
                rho = acc / sw + dj * beta[j]
                if rho > lam:
                    bj = (rho - lam) / dj
                elif rho < -lam:
                    bj = (rho + lam) / dj
                else:
                    bj = 0.0
                step = bj - beta[j]
                if step != 0.0:
                    for i in range(n):
                        r[i] -= step * X[i, j]
                    beta[j] = bj
                if fabs(step) > delta:
                    delta = fabs(step)
            acc = 0.0
            for i in range(n):
                acc += w[i] * r[i] * r[i]
            obj = 0.5 * acc / sw
            for j in range(p):
                obj += lam * fabs(beta[j])
            trace[sweep] = obj
            if delta < tol:
                converged = True
                break
    return b0, beta, int(sweeps), bool(converged), np.asarray(trace[:sweeps]).copy()


def split_scan(object xs_in, object ys_in, long long min_leaf):
    """Best variance-reduction split on a presorted column; see fallback docs."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xs = np.ascontiguousarray(xs_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ys = np.ascontiguousarray(ys_in, dtype=np.float64)
    cdef long long n = xs.shape[0]
    if min_leaf < 1 or n < 2 * min_leaf:
        return -INFINITY, -1
    cdef double total = 0.0, run = 0.0, parent, gain, best_gain = -INFINITY
    cdef long long pos, best_pos = -1
    cdef long long i
    with nogil:
        for i in range(n):
            total += ys[i]
        parent = total * total / n
        for pos in range(1, n - min_leaf + 1):
            run += ys[pos - 1]
            if pos < min_leaf:
                continue
            if xs[pos - 1] >= xs[pos]:
                continue
            gain = run * run / pos + (total - run) * (total - run) / (n - pos) - parent
            if gain > best_gain:
                best_gain = gain
                best_pos = pos
    if best_pos < 0:
        return -INFINITY, -1
    return best_gain, int(best_pos)
