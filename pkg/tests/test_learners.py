"""Lasso, greedy trees, and the complexity/rate calculators."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from mwdml.arrays import Shape, generate_latent, materialize, plr_spec
from mwdml.learners import (
    LassoSpec,
    LearnerError,
    RateInputs,
    TreeSpec,
    default_penalty,
    fit_lasso,
    fit_plr_nuisance,
    fit_tree,
    plr_feature_names,
    rho_rate,
    vc_characteristics,
)


class TestLasso:
    def test_soft_threshold_closed_form(self):
        # one standardized column: beta_hat = sign(b) * max(|b| - lam, 0)
        X = np.array([[-1.0], [-1.0], [1.0], [1.0]])
        y = 2.0 + 1.5 * X[:, 0]
        fit = fit_lasso(LassoSpec(penalty=0.5), X, y)
        assert fit.converged
        assert fit.intercept == pytest.approx(2.0, abs=1e-12)
        assert fit.coef[0] == pytest.approx(1.0, abs=1e-12)

    def test_full_shrinkage_leaves_intercept_only(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        fit = fit_lasso(LassoSpec(penalty=1e6), X, y)
        np.testing.assert_array_equal(fit.coef, np.zeros(4))
        assert fit.intercept == pytest.approx(y.mean(), abs=1e-12)
        assert fit.support.size == 0

    def test_zero_penalty_matches_least_squares(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(60, 3)) * np.array([1.0, 5.0, 0.2])
        y = 1.0 + X @ np.array([0.5, -0.2, 2.0]) + 0.05 * rng.normal(size=60)
        fit = fit_lasso(LassoSpec(penalty=0.0, max_iter=5000, tol=1e-13), X, y)
        Z = np.column_stack([np.ones(60), X])
        coef = np.linalg.lstsq(Z, y, rcond=None)[0]
        np.testing.assert_allclose(np.r_[fit.intercept, fit.coef], coef, atol=1e-8)

    def test_objective_trace_monotone(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 6))
        y = rng.normal(size=40)
        fit = fit_lasso(LassoSpec(penalty=0.1), X, y)
        assert np.all(np.diff(fit.objective) <= 1e-12)

    def test_constant_column_stays_zero(self):
        rng = np.random.default_rng(3)
        X = np.column_stack([np.full(30, 2.0), rng.normal(size=30)])
        y = X[:, 1] * 3.0
        fit = fit_lasso(LassoSpec(penalty=0.01), X, y)
        assert fit.coef[0] == 0.0
        assert abs(fit.coef[1]) > 1.0

    def test_uniform_weights_match_unweighted(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(30, 3))
        y = rng.normal(size=30)
        a = fit_lasso(LassoSpec(penalty=0.05), X, y)
        b = fit_lasso(LassoSpec(penalty=0.05), X, y, sample_weight=np.full(30, 7.0))
        assert a.intercept == pytest.approx(b.intercept, abs=1e-10)
        np.testing.assert_allclose(a.coef, b.coef, atol=1e-10)

    def test_logistic_matches_direct_mle(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(400, 2))
        p = expit(0.3 + 1.2 * X[:, 0] - 0.7 * X[:, 1])
        y = (rng.uniform(size=400) < p).astype(float)
        fit = fit_lasso(LassoSpec(penalty=0.0, link="logistic", max_iter=200, tol=1e-10), X, y)
        assert fit.converged

        def nll(b):
            eta = b[0] + X @ b[1:]
            return float(np.mean(np.log1p(np.exp(eta)) - y * eta))

        res = minimize(nll, np.zeros(3), method="BFGS", tol=1e-12)
        np.testing.assert_allclose(np.r_[fit.intercept, fit.coef], res.x, atol=2e-5)
        preds = fit.predict(X)
        assert np.all((preds > 0) & (preds < 1))

    def test_input_validation(self):
        with pytest.raises(LearnerError):
            LassoSpec(penalty=-1.0)
        with pytest.raises(LearnerError):
            LassoSpec(penalty=0.0, link="probit")
        with pytest.raises(LearnerError):
            fit_lasso(LassoSpec(penalty=0.1), np.ones((3, 2)), np.ones(4))
        with pytest.raises(LearnerError):
            fit_lasso(LassoSpec(penalty=0.1), np.array([[np.nan]]), np.ones(1))

    def test_default_penalty_formula(self):
        from scipy.special import ndtri

        shape = Shape((20, 50))
        y = np.array([0.0, 2.0])  # sd = 1
        expect = ndtri(1.0 - 1.0 / 50) / math.sqrt(1000.0)
        assert default_penalty(y, shape) == pytest.approx(expect, rel=1e-12)


class TestTree:
    def test_constant_target_single_leaf(self):
        fit = fit_tree(TreeSpec(max_leaves=8), np.arange(10.0), np.full(10, 3.0))
        assert fit.n_leaves == 1
        np.testing.assert_array_equal(fit.predict(np.array([0.0, 100.0])), [3.0, 3.0])

    def test_single_leaf_is_grand_mean(self):
        y = np.array([1.0, 2.0, 6.0])
        fit = fit_tree(TreeSpec(max_leaves=1), np.arange(3.0), y)
        assert fit.n_leaves == 1
        assert fit.predict(np.array([5.0]))[0] == pytest.approx(3.0)

    def test_step_function_recovered(self):
        X = np.array([0.0, 1.0, 2.0, 3.0])
        y = np.array([1.0, 1.0, 5.0, 5.0])
        fit = fit_tree(TreeSpec(max_leaves=2), X, y)
        assert fit.n_leaves == 2
        assert fit.threshold[0] == pytest.approx(1.5)
        np.testing.assert_array_equal(fit.predict(X), y)

    def test_interpolates_distinct_points_with_enough_leaves(self):
        rng = np.random.default_rng(6)
        X = np.arange(8.0)
        y = rng.normal(size=8)
        fit = fit_tree(TreeSpec(max_leaves=8), X, y)
        np.testing.assert_allclose(fit.predict(X), y, atol=1e-12)
        assert fit.n_leaves == 8

    def test_min_leaf_limits_splitting(self):
        rng = np.random.default_rng(7)
        fit = fit_tree(TreeSpec(max_leaves=10, min_leaf=4), np.arange(10.0), rng.normal(size=10))
        assert fit.n_leaves <= 2

    def test_duplicate_feature_tie_breaks_low_index(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        X = np.column_stack([x, x])
        y = np.array([0.0, 0.0, 4.0, 4.0])
        fit = fit_tree(TreeSpec(max_leaves=2), X, y)
        assert fit.feature[0] == 0

    def test_two_feature_interaction(self):
        # y = 4*1{x1>0.5, x2>0.5}: needs three leaves of a greedy tree
        X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
        y = np.array([0.0, 0.0, 0.0, 4.0, 0.0, 4.0])
        fit = fit_tree(TreeSpec(max_leaves=4), X, y)
        np.testing.assert_allclose(fit.predict(X), y, atol=1e-12)

    def test_depth_and_validation(self):
        X = np.arange(4.0)
        fit = fit_tree(TreeSpec(max_leaves=4), X, np.array([0.0, 1.0, 2.0, 3.0]))
        assert fit.depth >= 2
        with pytest.raises(LearnerError):
            fit_tree(TreeSpec(max_leaves=2), np.ones((3, 1)), np.ones(4))
        with pytest.raises(LearnerError):
            TreeSpec(max_leaves=0)


class TestComplexityCalculators:
    def test_glm_frozen(self):
        decl = vc_characteristics("glm", K=2, s=3, p=100)
        assert decl.v == 3.0
        assert decl.A == pytest.approx(90.60939428196816, rel=1e-12)

    def test_glm_floor_applies(self):
        decl = vc_characteristics("glm", K=2, s=5, p=5)
        assert decl.A == pytest.approx(math.e)

    def test_tree_frozen(self):
        decl = vc_characteristics("tree", K=2, L=1, p=1)
        assert decl.v == pytest.approx(1.3862943611198906, rel=1e-12)
        assert decl.A == pytest.approx(math.e)  # C=1 floored

    def test_dnn_frozen(self):
        decl = vc_characteristics("dnn", K=3, L=2, W=3, p=4, U=10.0)
        assert decl.v == pytest.approx(44.26655344936724, rel=1e-12)

    def test_bad_cases(self):
        with pytest.raises(LearnerError):
            vc_characteristics("glm", K=2, s=0, p=3)
        with pytest.raises(LearnerError):
            vc_characteristics("forest", K=2)
        with pytest.raises(LearnerError):
            vc_characteristics("tree", K=2, L=2, p=3, C=0.0)


class TestRhoRate:
    FROZEN_INPUTS = dict(v=2.0, A=math.e, nbar=50, n=100, envelope_norm=1.5, q=4.0, k=2)

    def test_frozen_branches(self):
        out = rho_rate(RateInputs(**self.FROZEN_INPUTS))
        assert out.log_factor == pytest.approx(7.824046010856292, rel=1e-12)
        assert out.branch_variance == pytest.approx(0.07824046010856292, rel=1e-12)
        assert out.branch_envelope == pytest.approx(13.773531595499156, rel=1e-12)
        assert out.rho == out.branch_envelope
        assert out.active == "envelope"

    def test_non_increasing_in_n(self):
        rhos = []
        for n in (50, 200, 800, 3200):
            args = dict(self.FROZEN_INPUTS, n=n, nbar=n)
            rhos.append(rho_rate(RateInputs(**args)).rho)
        assert all(a > b for a, b in zip(rhos, rhos[1:]))

    def test_variance_branch_scaling(self):
        # k=2 variance branch scales exactly like 1/n once A >= nbar
        base = dict(self.FROZEN_INPUTS, A=100.0, nbar=10, envelope_norm=1e-9)
        r1 = rho_rate(RateInputs(**base))
        r2 = rho_rate(RateInputs(**dict(base, n=400)))
        assert r1.active == "variance"
        assert r1.rho / r2.rho == pytest.approx(4.0, rel=1e-12)

    def test_interaction_exponent(self):
        base = dict(self.FROZEN_INPUTS, envelope_norm=1e-9, k=1)
        r1 = rho_rate(RateInputs(**base)).rho
        r2 = rho_rate(RateInputs(**dict(base, k=2))).rho
        assert r2 == pytest.approx(r1**2, rel=1e-12)

    def test_validation(self):
        with pytest.raises(LearnerError):
            RateInputs(v=2.0, A=1.0, nbar=10, n=10, envelope_norm=1.0, q=4.0, k=1)
        with pytest.raises(LearnerError):
            RateInputs(v=2.0, A=math.e, nbar=10, n=10, envelope_norm=1.0, q=2.0, k=1)


class TestPlrNuisanceFit:
    def test_feature_names_numeric_order(self):
        spec = plr_spec((3, 3), p=12)
        sample = materialize(generate_latent(spec, 0), spec)
        names = plr_feature_names(sample)
        assert names[:3] == ["x1", "x2", "x3"]
        assert names[-1] == "x12"
        assert len(names) == 12

    def test_fit_returns_both_components(self):
        spec = plr_spec((20, 20))
        sample = materialize(generate_latent(spec, 1), spec)
        eta, fits = fit_plr_nuisance(sample)
        assert set(eta.funcs) == {"l", "m"}
        assert eta.meta["kind"] == "lasso"
        for comp in ("l", "m"):
            pred = eta.predict(comp, sample.fields)
            assert np.isfinite(pred).all()
            assert fits[comp].converged

    def test_huge_penalty_predicts_the_mean(self):
        spec = plr_spec((10, 10))
        sample = materialize(generate_latent(spec, 2), spec)
        eta, _ = fit_plr_nuisance(sample, penalty=1e6)
        np.testing.assert_allclose(
            np.broadcast_to(eta.predict("l", sample.fields), (10, 10)),
            np.full((10, 10), sample.fields["y"].mean()),
            atol=1e-10,
        )

    def test_recovers_oracle_within_noise(self):
        from mwdml.models import nuisance_distance, plr_oracle_nuisance

        params = dict(theta0=1.0, p=10, s=2)
        spec = plr_spec((40, 40), **params)
        sample = materialize(generate_latent(spec, 3), spec)
        eta, _ = fit_plr_nuisance(sample)
        assert nuisance_distance(eta, plr_oracle_nuisance(params), sample) < 0.5
