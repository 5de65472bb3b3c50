"""Function grids, sup-process simulation, and the maximal-inequality report."""

import math

import numpy as np
import pytest

from mwdml.arrays import additive_spec
from mwdml.bounds import (
    BoundsError,
    IdentityGrid,
    ThresholdGrid,
    UncenteredGridError,
    VcDecl,
    bound_check,
    center_grid,
    empirical_sup_process,
)


class TestGrids:
    def test_vc_decl_validation(self):
        with pytest.raises(BoundsError):
            VcDecl(1.0, 1.0)
        with pytest.raises(BoundsError):
            VcDecl(10.0, 0.5)

    def test_threshold_grid_evaluate(self):
        g = ThresholdGrid("x", (-1.0, 0.0, 1.0))
        out = g.evaluate({"x": np.array([[-2.0, 0.0], [1.0, 2.0]])})
        assert out.shape == (3, 2, 2)
        np.testing.assert_array_equal(out[0], [[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_array_equal(out[1], [[1.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(out[2], [[1.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(g.envelope({"x": np.zeros(3)}), np.ones(3))
        assert g.vc == VcDecl(2.0 * math.e, 1.0)

    def test_identity_grid(self):
        g = IdentityGrid("y")
        x = np.array([-3.0, 2.0])
        np.testing.assert_array_equal(g.evaluate({"y": x})[0], x)
        np.testing.assert_array_equal(g.envelope({"y": x}), [3.0, 2.0])
        assert g.vc is None

    def test_center_grid_exact_means(self):
        # x = u_10 + u_01 + u_11, Rademacher factors: support {-3,-1,1,3}
        spec = additive_spec((4, 4))
        g = center_grid(ThresholdGrid("x", (-3.0, 0.0, 3.0)), spec)
        np.testing.assert_allclose(g.offsets, [0.125, 0.5, 1.0], atol=1e-14)
        out = g.evaluate({"x": np.array([5.0])})
        np.testing.assert_allclose(out[:, 0], [-0.125, -0.5, -1.0], atol=1e-14)
        # envelope widens by the largest offset
        np.testing.assert_allclose(g.envelope({"x": np.array([5.0])}), [2.0], atol=1e-14)
        assert g.size == 3
        assert g.vc == VcDecl(2.0 * math.e, 1.0)


class TestSupProcess:
    def test_rejects_uncentered_grid(self):
        spec = additive_spec((4, 4), atoms=(0.0, 2.0), probs=(0.5, 0.5))
        with pytest.raises(UncenteredGridError):
            empirical_sup_process(ThresholdGrid("x", (0.0,)), spec, (1, 0), 100, 0)

    def test_rejects_small_replication_count(self):
        spec = additive_spec((4, 4))
        grid = center_grid(ThresholdGrid("x", (0.0,)), spec)
        with pytest.raises(BoundsError):
            empirical_sup_process(grid, spec, (1, 0), 50, 0)

    def test_row_mask_matches_enumerated_expectation(self):
        # x = u_row only: sqrt(N1)*|H^{(1,0)}| = sqrt(6)*|mean of 6 Rademacher|,
        # whose exact expectation is sqrt(6) * 120/384
        spec = additive_spec((6, 3), include=[(1, 0)])
        res = empirical_sup_process(IdentityGrid("x"), spec, (1, 0), 400, seed=5)
        exact = math.sqrt(6.0) * (120.0 / 384.0)
        assert abs(res.estimate - exact) < 4.0 * res.se
        assert res.scale == pytest.approx(math.sqrt(6.0))
        assert res.scaled_sups.shape == (400,)

    def test_no_interaction_design_is_degenerate_for_full_mask(self):
        # linear grid + additive DGP without a (1,1) factor: pi_{11} == 0
        spec = additive_spec((5, 5), include=[(1, 0), (0, 1)])
        res = empirical_sup_process(IdentityGrid("x"), spec, (1, 1), 100, seed=2)
        assert res.estimate <= 1e-12

    def test_moment_q2(self):
        spec = additive_spec((4, 4))
        grid = center_grid(ThresholdGrid("x", (0.0,)), spec)
        res = empirical_sup_process(grid, spec, (0, 1), 150, seed=9)
        val, se = res.moment(2.0)
        assert val == pytest.approx(math.sqrt(np.mean(res.scaled_sups**2)), rel=1e-12)
        assert se > 0.0


class TestBoundCheck:
    def test_requires_declared_vc(self):
        spec = additive_spec((4, 4))
        with pytest.raises(BoundsError):
            bound_check(IdentityGrid("x"), spec, [(1, 0)], [4, 8], replications=100)

    def test_report_structure(self):
        spec = additive_spec((4, 4))
        grid = center_grid(ThresholdGrid("x", (-1.0, 0.0, 1.0)), spec)
        rep = bound_check(grid, spec, [(1, 0), (1, 1)], [4, 8], replications=100, seed=3)
        assert len(rep.rows) == 4
        assert set(rep.per_mask) == {(1, 0), (1, 1)}
        for row in rep.rows:
            assert row.lhs > 0.0
            assert row.rhs_local > 0.0
            assert math.isfinite(row.ratio)
        summ = rep.per_mask[(1, 0)]
        assert summ.max_ratio >= summ.median_ratio > 0.0
        assert summ.max_over_median >= 1.0
        assert not summ.degenerate
        assert rep.meta["effective_A"] >= rep.meta["floor_weak"]
        assert rep.meta["floor_strong"] >= rep.meta["floor_weak"] - 1e-12

    def test_degenerate_mask_flagged(self):
        # no-interaction DGP with a linear grid: the (1,1) component vanishes
        spec = additive_spec((4, 4), include=[(1, 0), (0, 1)])
        grid = IdentityGrid("x", vc=VcDecl(2.0 * math.e, 1.0))
        rep = bound_check(grid, spec, [(1, 1)], [4, 8], replications=100, seed=1)
        assert rep.per_mask[(1, 1)].degenerate
        assert rep.per_mask[(1, 1)].max_over_median == 0.0
        assert all(row.lhs <= 1e-10 for row in rep.rows)

    def test_csv_output(self, tmp_path):
        spec = additive_spec((4, 4))
        grid = center_grid(ThresholdGrid("x", (0.0,)), spec)
        rep = bound_check(grid, spec, [(0, 1)], [4], replications=100, seed=7)
        path = tmp_path / "bounds.csv"
        rep.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "mask,n,lhs,lhs_se,rhs_global,rhs_local,ratio"
        assert len(lines) == 2
        assert lines[1].startswith("01,4,")
