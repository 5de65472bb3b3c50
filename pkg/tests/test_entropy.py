"""Covering-entropy integral and admissibility thresholds.

Reference values were frozen from an independent high-precision quadrature
(mpmath, 50 digits) of integral_0^delta (1 + v*log(A/tau))^{k/2} dtau.
"""

import math

import numpy as np
import pytest

from mwdml.entropy import (
    EntropyError,
    entropy_integral_vc,
    vc_log_factor,
    vc_threshold_floor,
    vc_threshold_floor_strong,
)

E = math.e

# (A, v, k, delta) -> J, frozen independently
FROZEN = [
    ((E, 1.0, 1, 1.0), 1.7121666017860275557),
    ((E, 1.0, 1, 0.5), 0.95344338099207427651),
    ((E, 1.0, 3, 1.0), 5.3966770274252314312),
    ((E * E, 2.0, 2, 1.0), 7.0),  # k=2 closed form: delta*(1 + v + v*log(A/delta)) at delta=1
]


@pytest.mark.parametrize("args, expect", FROZEN)
def test_frozen_values(args, expect):
    assert entropy_integral_vc(*args) == pytest.approx(expect, rel=1e-12)


def test_zero_delta():
    assert entropy_integral_vc(E, 1.0, 2, 0.0) == 0.0


def test_scaling_subadditivity():
    # concave through the origin: J(c*delta) <= c*J(delta) for c >= 1
    j1 = entropy_integral_vc(E, 1.5, 2, 0.3)
    j2 = entropy_integral_vc(E, 1.5, 2, 0.6)
    assert j2 <= 2.0 * j1 + 1e-12


def test_j_over_delta_non_increasing():
    deltas = np.linspace(0.05, 1.0, 12)
    vals = [entropy_integral_vc(2.0 * E, 2.0, 3, d) / d for d in deltas]
    assert np.all(np.diff(vals) <= 1e-12)


def test_concavity_in_delta():
    deltas = np.linspace(0.1, 1.0, 10)
    vals = np.array([entropy_integral_vc(E, 1.0, 2, d) for d in deltas])
    second = np.diff(vals, 2)
    assert np.all(second <= 1e-12)


def test_monotone_in_v_and_a():
    base = entropy_integral_vc(E, 1.0, 2, 0.7)
    assert entropy_integral_vc(E, 2.0, 2, 0.7) > base
    assert entropy_integral_vc(10.0, 1.0, 2, 0.7) > base


def test_input_validation():
    with pytest.raises(EntropyError):
        entropy_integral_vc(1.0, 1.0, 1, 0.5)  # A < e
    with pytest.raises(EntropyError):
        entropy_integral_vc(E, 0.5, 1, 0.5)
    with pytest.raises(EntropyError):
        entropy_integral_vc(E, 1.0, 0, 0.5)
    with pytest.raises(EntropyError):
        entropy_integral_vc(E, 1.0, 1, 1.5)


class TestThresholds:
    def test_floor_small_k_is_e(self):
        for K in (1, 2, 3, 8):
            assert vc_threshold_floor(K) == pytest.approx(E)
        assert vc_threshold_floor(9) == pytest.approx(E)  # exp(16/16) == e exactly

    def test_floor_grows_eventually(self):
        assert vc_threshold_floor(17) == pytest.approx(math.exp(2.0))
        assert vc_threshold_floor(17) > vc_threshold_floor(10)

    def test_strong_floor_dominates_for_k_ge_3(self):
        assert vc_threshold_floor_strong(2) == pytest.approx(vc_threshold_floor(2))
        assert vc_threshold_floor_strong(3) == pytest.approx(math.exp(4.0) / 16.0)
        for K in (3, 4, 5):
            assert vc_threshold_floor_strong(K) >= vc_threshold_floor(K)

    def test_invalid_k(self):
        with pytest.raises(EntropyError):
            vc_threshold_floor(0)


def test_vc_log_factor():
    assert vc_log_factor(E, 2.0, 1) == pytest.approx(2.0)
    assert vc_log_factor(E, 1.0, 100) == pytest.approx(math.log(100.0))
    assert vc_log_factor(50.0, 3.0, 10) == pytest.approx(3.0 * math.log(50.0))
