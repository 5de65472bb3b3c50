"""Pure-NumPy implementations of the hot kernels.

These are the fallback twins of the compiled routines in ``_kernels.pyx``.
The keyed generator must be *bit-identical* to the compiled version (it is an
integer pipeline); the floating-point kernels (coordinate descent, split
scans) follow the same operation order so results agree to rounding error.

Selected at import time by :mod:`mwdml._backend`.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 2.0 ** -53


def uniform_block(key: int, count: int) -> np.ndarray:
    """Counter-based uniforms: element ``i`` is a pure function of ``(key, i)``.

    Splitmix64 output stream seeded at ``key``: the i-th value is the
    finalizer applied to ``key + (i+1)*GOLDEN_GAMMA`` (mod 2^64), mapped to the
    open interval (0, 1) via the top 53 bits.  Order-independent by
    construction, which is what makes parallel latent generation safe.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(key & 0xFFFFFFFFFFFFFFFF) + idx * _GOLD
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    z = z ^ (z >> _S31)
    return ((z >> _S11).astype(np.float64) + 0.5) * _INV53


def lasso_cd(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    lam: float,
    tol: float,
    max_iter: int,
):
    """Cyclic coordinate descent with soft-thresholding.

    Minimizes ``(1/(2*sum(w))) * sum_i w_i (y_i - b0 - X_i beta)^2 + lam*||beta||_1``
    with an unpenalized intercept.  Columns are expected pre-standardized by
    the caller; zero-variance columns (weighted) are skipped and keep beta=0.

    Returns ``(b0, beta, n_sweeps, converged, objective_trace)`` where the
    trace holds the penalized objective after each full sweep (non-increasing
    by construction of exact coordinate minimization).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, p = X.shape
    sw = float(w.sum())
    if sw <= 0:
        raise ValueError("weights must have positive sum")
    wX = w[:, None] * X
    denom = (wX * X).sum(axis=0) / sw
    beta = np.zeros(p)
    b0 = float(w @ y) / sw
    r = y - b0
    trace = []
    converged = False
    sweeps = 0
    for _ in range(max_iter):
        sweeps += 1
        delta = 0.0
        db0 = float(w @ r) / sw
        b0 += db0
        r -= db0
        delta = abs(db0)
        for j in range(p):
            dj = denom[j]
            if dj <= 0.0:
                continue
            rho = float(wX[:, j] @ r) / sw + dj * beta[j]
            if rho > lam:
                bj = (rho - lam) / dj
            elif rho < -lam:
                bj = (rho + lam) / dj
            else:
                bj = 0.0
            step = bj - beta[j]
            if step != 0.0:
                r -= step * X[:, j]
                beta[j] = bj
            if abs(step) > delta:
                delta = abs(step)
        obj = 0.5 * float(w @ (r * r)) / sw + lam * float(np.abs(beta).sum())
        trace.append(obj)
        if delta < tol:
            converged = True
            break
    return b0, beta, sweeps, converged, np.asarray(trace)


def split_scan(xs: np.ndarray, ys: np.ndarray, min_leaf: int):
    """Best axis split of a presorted feature column by variance reduction.

    ``xs`` must be sorted ascending with ``ys`` in the same order.  Returns
    ``(gain, pos)`` where ``pos`` is the left-child size and the cut sits
    between ``xs[pos-1]`` and ``xs[pos]``; ``(-inf, -1)`` when no valid split
    exists.  Gain is ``SL^2/nL + SR^2/nR - S^2/n`` (equals the SSE drop).
    Ties break to the smallest ``pos``.
    """
    n = xs.shape[0]
    if min_leaf < 1 or n < 2 * min_leaf:
        return -np.inf, -1
    cums = np.cumsum(ys)
    total = cums[-1]
    parent = total * total / n
    pos = np.arange(min_leaf, n - min_leaf + 1)
    sl = cums[pos - 1]
    gains = sl * sl / pos + (total - sl) * (total - sl) / (n - pos) - parent
    gains[xs[pos - 1] >= xs[pos]] = -np.inf
    i = int(np.argmax(gains))
    if not np.isfinite(gains[i]):
        return -np.inf, -1
    return float(gains[i]), int(pos[i])
