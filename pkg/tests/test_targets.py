"""Tests for target densities, rejection sampling, and MC error metrics."""

import math

import numpy as np
import pytest

from spamm.errors import BoundTooLooseError, InvalidParameterError, UndefinedStatisticError
from spamm.model import SparseMixture, WrappedComponent, uniform_mixture
from spamm.selection import weighted_ks_uniform
from spamm.targets import (
    TargetDensity,
    bspline_value,
    friedman1_f2,
    friedman1_target,
    mc_relative_error,
    mixture_target,
    normalize_target,
    rejection_sample,
    spline_f1,
    spline_f1_target,
)
from spamm.torus import wrapped_normal_1d_logpdf


class TestBsplines:
    @pytest.mark.parametrize("order", [2, 4, 6])
    def test_unit_l2_norm(self, order):
        xs = np.linspace(0, 1, 20_001)
        vals = bspline_value(xs, order)
        assert np.trapezoid(vals * vals, xs) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("order", [2, 4, 6])
    def test_symmetric_about_half(self, order):
        xs = np.linspace(0, 1, 501)
        np.testing.assert_allclose(
            bspline_value(xs, order), bspline_value(1.0 - xs, order), atol=1e-12
        )

    @pytest.mark.parametrize("order", [2, 4, 6])
    def test_nonnegative_and_compact(self, order):
        xs = np.linspace(-0.5, 1.5, 1001)
        vals = bspline_value(xs, order)
        assert np.all(vals >= 0)
        outside = (xs < 0) | (xs > 1)
        assert np.all(vals[outside] == 0)

    def test_order_two_is_hat_function(self):
        # Up to the L2 constant, order 2 on [0,1] is the unit hat at 1/2.
        c = bspline_value(np.array([0.5]), 2)[0]
        assert bspline_value(np.array([0.25]), 2)[0] == pytest.approx(c / 2)
        assert c == pytest.approx(math.sqrt(3.0), rel=1e-9)  # 1 / sqrt(1/3)


class TestGroundTruthFunctions:
    def test_spline_f1_symmetry_and_sign(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1, size=(2_000, 9))
        vals = spline_f1(pts)
        assert np.all(vals >= 0)
        np.testing.assert_allclose(spline_f1(1.0 - pts), vals, atol=1e-10)

    def test_friedman_values(self):
        assert friedman1_f2(np.zeros((1, 10)))[0] == pytest.approx(5.0)
        x = np.zeros((1, 10))
        x[0, 0], x[0, 1] = 1.0, 0.5
        assert friedman1_f2(x)[0] == pytest.approx(15.0)

    def test_friedman_ignores_inactive_coordinates(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0, 1, size=(100, 10))
        perturbed = base.copy()
        perturbed[:, 5:] = rng.uniform(0, 1, size=(100, 5))
        np.testing.assert_array_equal(friedman1_f2(base), friedman1_f2(perturbed))

    def test_friedman_strictly_positive(self):
        rng = np.random.default_rng(2)
        assert np.all(friedman1_f2(rng.uniform(0, 1, (100_000, 10))) >= 5.0)


class TestNormalizeTarget:
    def test_constant_normalizes_to_one(self):
        target = normalize_target(lambda pts: np.full(pts.shape[0], 3.7), d=4, n_mc=10_000)
        rng = np.random.default_rng(3)
        np.testing.assert_allclose(target(rng.uniform(0, 1, (50, 4))), 1.0, atol=1e-12)

    def test_spline_target_self_consistent(self):
        target = spline_f1_target()
        rng = np.random.default_rng(4)
        n = 200_000
        vals = target(rng.uniform(0, 1, (n, 9)))
        se = vals.std(ddof=1) / math.sqrt(n)
        assert vals.mean() == pytest.approx(1.0, abs=3 * se)

    def test_friedman_target_self_consistent(self):
        target = friedman1_target()
        rng = np.random.default_rng(5)
        n = 200_000
        vals = target(rng.uniform(0, 1, (n, 10)))
        se = vals.std(ddof=1) / math.sqrt(n)
        assert vals.mean() == pytest.approx(1.0, abs=3 * se + 1e-3)

    def test_bound_dominates_probe(self):
        target = spline_f1_target()
        rng = np.random.default_rng(6)
        vals = target(rng.uniform(0, 1, (100_000, 9)))
        assert target.M >= vals.max()


class TestRejectionSample:
    def test_uniform_target_accepts_everything(self):
        target = TargetDensity(d=2, evaluator=lambda pts: np.ones(pts.shape[0]), M=1.0)
        batch = rejection_sample(target, 5_000, rng_seed=7)
        assert batch.n == 5_000
        assert np.all((batch.points >= 0) & (batch.points < 1))

    def test_acceptance_rate_half_for_loose_bound(self):
        # n large against the chunk size, so the partial last chunk barely
        # biases the accepted-to-proposed ratio.
        calls = {"proposed": 0}

        def evaluator(pts):
            calls["proposed"] += pts.shape[0]
            return np.ones(pts.shape[0])

        target = TargetDensity(d=1, evaluator=evaluator, M=2.0)
        batch = rejection_sample(target, 2_000_000, rng_seed=8)
        rate = batch.n / calls["proposed"]
        assert rate == pytest.approx(0.5, abs=0.02)

    def test_1d_wrapped_target_passes_ks(self):
        def evaluator(pts):
            return np.exp(wrapped_normal_1d_logpdf(pts[:, 0], 0.5, 0.01))

        target = TargetDensity(d=1, evaluator=evaluator, M=1.2 * evaluator(np.array([[0.5]]))[0])
        hits = 0
        n = 10_000
        for seed in range(20):
            batch = rejection_sample(target, n, rng_seed=seed)
            # CDF by quadrature, then the classical KS bound at the 95% level.
            grid = np.linspace(0, 1, 4097)
            pdf = evaluator(grid[:, None])
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))])
            cdf /= cdf[-1]
            transformed = np.interp(batch.points[:, 0], grid, cdf)
            stat = weighted_ks_uniform(transformed, np.ones(n))
            hits += stat.value < 1.36
        assert hits >= 18  # >= 90% of seeds

    def test_bound_too_loose_raises(self):
        target = TargetDensity(d=1, evaluator=lambda pts: np.full(pts.shape[0], 1e-9), M=1.0)
        with pytest.raises(BoundTooLooseError):
            rejection_sample(target, 100_000, rng_seed=9)

    def test_same_seed_bitwise_reproducible(self):
        target = spline_f1_target()
        b1 = rejection_sample(target, 2_000, rng_seed=10)
        b2 = rejection_sample(target, 2_000, rng_seed=10)
        np.testing.assert_array_equal(b1.points, b2.points)


class TestMcRelativeError:
    def test_identical_functions_error_zero(self):
        model = SparseMixture(2, [1.0], (WrappedComponent((0,), [0.5], [[0.01]]),))
        target = mixture_target(model)
        for q in (1, 2):
            assert mc_relative_error(target, model, q, 50_000, rng_seed=11) == 0.0

    def test_uniforms_error_zero(self):
        model = uniform_mixture(3, "diag")
        target = TargetDensity(d=3, evaluator=lambda pts: np.ones(pts.shape[0]), M=1.0)
        assert mc_relative_error(target, model, 1, 10_000, rng_seed=12) == 0.0

    def test_matches_quadrature_for_1d_bump(self):
        # f is uniform on [0,1]^2; p_hat puts a wrapped bump on coordinate 0.
        p_hat = SparseMixture(2, [1.0], (WrappedComponent((0,), [0.5], [[0.01]]),))
        target = TargetDensity(d=2, evaluator=lambda pts: np.ones(pts.shape[0]), M=1.0)
        xs = np.linspace(0, 1, 8193)
        bump = np.exp(wrapped_normal_1d_logpdf(xs, 0.5, 0.01))
        quad = np.trapezoid(np.abs(1.0 - bump), xs)
        n = 200_000
        got = mc_relative_error(target, p_hat, 1, n, rng_seed=13)
        # MC standard error of the numerator, inflated as a safe tolerance.
        rng = np.random.default_rng(14)
        sample_vals = np.abs(
            1.0 - np.exp(wrapped_normal_1d_logpdf(rng.uniform(0, 1, n), 0.5, 0.01))
        )
        se = sample_vals.std(ddof=1) / math.sqrt(n)
        assert got == pytest.approx(quad, abs=3 * se)

    def test_same_seed_reproducible(self):
        model = uniform_mixture(2, "vonmises")
        target = TargetDensity(d=2, evaluator=lambda pts: 1.0 + pts[:, 0] * 0, M=1.0)
        a = mc_relative_error(target, model, 2, 30_000, rng_seed=15)
        b = mc_relative_error(target, model, 2, 30_000, rng_seed=15)
        assert a == b

    def test_zero_norm_degenerate(self):
        model = uniform_mixture(1, "diag")
        target = TargetDensity(d=1, evaluator=lambda pts: np.zeros(pts.shape[0]), M=1.0)
        with pytest.raises(UndefinedStatisticError):
            mc_relative_error(target, model, 1, 1_000, rng_seed=16)

    def test_rejects_bad_q(self):
        model = uniform_mixture(1, "diag")
        target = TargetDensity(d=1, evaluator=lambda pts: np.ones(pts.shape[0]), M=1.0)
        with pytest.raises(InvalidParameterError):
            mc_relative_error(target, model, 3, 1_000, rng_seed=17)
