"""Uniform entropy integral for VC-type classes.

For a class with covering-number characteristics (A, v) and interaction order
k, the entropy integral is bounded by

    J(delta) = integral_0^delta (1 + v*log(A/tau))^{k/2} dtau,

which is what the maximal-inequality right-hand sides use.  The integrand has
a weak singularity at 0; substituting tau = A*exp(-s) turns it into a smooth
Laplace-type integral on [log(A/delta), inf), which adaptive quadrature
handles to far better than the 1e-8 relative error the checks need.
"""

from __future__ import annotations

import math

from scipy.integrate import quad


class EntropyError(ValueError):
    pass


def vc_threshold_floor(K: int) -> float:
    """Lower admissibility threshold for A: e^{2(K-1)/16} v e.

    An alternative reading places the divisor outside the exponent,
    (e^{2(K-1)})/16 v e, which is the *stronger* floor for K >= 3 (the two
    agree for K <= 2).  Validation uses the weaker form; reports carry both.
    """
    if K < 1:
        raise EntropyError("K must be >= 1")
    return max(math.exp(2.0 * (K - 1) / 16.0), math.e)


def vc_threshold_floor_strong(K: int) -> float:
    """The alternative (stronger for K >= 3) threshold: (e^{2(K-1)})/16 v e."""
    if K < 1:
        raise EntropyError("K must be >= 1")
    return max(math.exp(2.0 * (K - 1)) / 16.0, math.e)


def entropy_integral_vc(A: float, v: float, k: int, delta: float) -> float:
    """J(delta) = integral_0^delta (1 + v log(A/tau))^{k/2} dtau.

    Preconditions: A >= e, v >= 1, k >= 1, 0 <= delta <= 1.  Relative
    quadrature error is driven well below 1e-8.
    """
    if not (A >= math.e - 1e-12):
        raise EntropyError(f"A must be >= e, got {A}")
    if v < 1.0:
        raise EntropyError(f"v must be >= 1, got {v}")
    if k < 1:
        raise EntropyError(f"k must be >= 1, got {k}")
    if not (0.0 <= delta <= 1.0):
        raise EntropyError(f"delta must be in [0, 1], got {delta}")
    if delta == 0.0:
        return 0.0
    s0 = math.log(A / delta)
    half_k = 0.5 * k

    def integrand(s: float) -> float:
        return (1.0 + v * s) ** half_k * math.exp(-s)

    val, _err = quad(integrand, s0, math.inf, epsabs=0.0, epsrel=1e-12, limit=300)
    return A * val


def vc_log_factor(A: float, v: float, nbar: int | float) -> float:
    """The recurring complexity factor v * log(A v Nbar)."""
    return v * math.log(max(A, float(nbar)))
