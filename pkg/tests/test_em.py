"""Tests for the E-steps, M-steps, and full EM cycles of all three families."""

import math

import numpy as np
import pytest
from conftest import random_instance

from spamm.em import (
    EmConfig,
    WrappedResponsibilities,
    e_step_diag,
    e_step_von_mises,
    e_step_wrapped,
    em_step,
    m_step_diag,
    m_step_von_mises,
    m_step_wrapped,
)
from spamm.model import (
    DiagWrappedComponent,
    SparseMixture,
    VonMisesComponent,
    WeightedSampleBatch,
    WrappedComponent,
    neg_log_likelihood,
    sample,
)
from spamm.torus import TruncationLevel, lattice_offsets


def unit_batch(points):
    points = np.asarray(points, dtype=float)
    return WeightedSampleBatch(points, np.ones(points.shape[0]))


class TestEStepVonMises:
    def test_single_component(self):
        model = SparseMixture(1, [1.0], (VonMisesComponent((0,), [0.5], [3.0]),))
        batch = unit_batch(np.linspace(0, 0.99, 17)[:, None])
        resp = e_step_von_mises(model, batch)
        np.testing.assert_allclose(resp.beta, 1.0)

    def test_identical_components_split_by_alpha(self):
        comp = VonMisesComponent((0,), [0.5], [3.0])
        model = SparseMixture(1, [0.3, 0.7], (comp, comp))
        batch = unit_batch(np.linspace(0, 0.99, 23)[:, None])
        resp = e_step_von_mises(model, batch)
        np.testing.assert_allclose(resp.beta[:, 0], 0.3, atol=1e-14)
        np.testing.assert_allclose(resp.beta[:, 1], 0.7, atol=1e-14)

    def test_well_separated_clusters(self):
        model = SparseMixture(
            1,
            [0.5, 0.5],
            (
                VonMisesComponent((0,), [0.2], [200.0]),
                VonMisesComponent((0,), [0.7], [200.0]),
            ),
        )
        resp = e_step_von_mises(model, unit_batch([[0.2]]))
        assert resp.beta[0, 0] > 0.999

    def test_rows_normalize(self):
        rng = np.random.default_rng(0)
        model, batch = random_instance(rng, "vonmises", d=2, k=3, n=100)
        resp = e_step_von_mises(model, batch)
        np.testing.assert_allclose(resp.beta.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(resp.beta >= 0)


class TestMStepVonMises:
    def test_point_mass_degenerates_to_kappa_cap(self):
        model = SparseMixture(1, [1.0], (VonMisesComponent((0,), [0.9], [1.0]),))
        batch = unit_batch(np.full((50, 1), 0.25))
        resp = e_step_von_mises(model, batch)
        new = m_step_von_mises(model, batch, resp)
        assert new.components[0].mu[0] == pytest.approx(0.25, abs=1e-15)
        assert new.components[0].kappa[0] == 1e4

    def test_uniform_grid_gives_tiny_kappa(self):
        model = SparseMixture(1, [1.0], (VonMisesComponent((0,), [0.3], [2.0]),))
        batch = unit_batch(((np.arange(1000) + 0.5) / 1000)[:, None])
        new = m_step_von_mises(model, batch, e_step_von_mises(model, batch))
        assert new.components[0].kappa[0] < 0.05

    def test_matches_numeric_maximizer(self):
        from scipy.optimize import minimize
        from scipy.special import i0e

        rng = np.random.default_rng(42)
        model = SparseMixture(1, [1.0], (VonMisesComponent((0,), [0.4], [4.0]),))
        base = sample(
            SparseMixture(1, [1.0], (VonMisesComponent((0,), [0.35], [6.0]),)), 200, rng_seed=5
        )
        batch = WeightedSampleBatch(base.points, rng.uniform(0.5, 1.5, 200))
        resp = e_step_von_mises(model, batch)
        new = m_step_von_mises(model, batch, resp)
        v = batch.weights * resp.beta[:, 0]
        x = batch.points[:, 0]

        def neg_q(params):
            mu, kappa = params
            if kappa <= 0:
                return np.inf
            return -np.sum(
                v * (kappa * np.cos(2 * np.pi * (x - mu)) - (np.log(i0e(kappa)) + kappa))
            )

        # Grid then refine, independent of the closed-form update path.
        grid = [
            (mu, kappa)
            for mu in np.linspace(0, 1, 41, endpoint=False)
            for kappa in np.geomspace(0.05, 100, 41)
        ]
        start = min(grid, key=neg_q)
        opt = minimize(neg_q, start, method="Nelder-Mead", options={"xatol": 1e-9, "fatol": 1e-12})
        mu_hat, kappa_hat = opt.x
        circ_dist = min(abs(new.components[0].mu[0] - mu_hat % 1.0), 1 - abs(new.components[0].mu[0] - mu_hat % 1.0))
        assert circ_dist < 1e-4
        assert new.components[0].kappa[0] == pytest.approx(kappa_hat, abs=1e-4)

    def test_m_step_is_local_maximum(self):
        from scipy.special import i0e

        rng = np.random.default_rng(1)
        model, batch = random_instance(rng, "vonmises", d=2, k=2, n=250)
        resp = e_step_von_mises(model, batch)
        new = m_step_von_mises(model, batch, resp)
        for k, comp in enumerate(new.components):
            if not comp.u:
                continue
            v = batch.weights * resp.beta[:, k]
            for j, coord in enumerate(comp.u):
                x = batch.points[:, coord]

                def q(mu, kappa):
                    return np.sum(
                        v * (kappa * np.cos(2 * np.pi * (x - mu)) - (np.log(i0e(kappa)) + kappa))
                    )

                best = q(comp.mu[j], comp.kappa[j])
                for dmu in (-1e-3, 1e-3):
                    assert q(comp.mu[j] + dmu, comp.kappa[j]) <= best + 1e-12
                for dk in (-1e-3, 1e-3):
                    if comp.kappa[j] + dk > 0:
                        assert q(comp.mu[j], comp.kappa[j] + dk) <= best + 1e-12


class TestEStepWrapped:
    def make_model(self):
        return SparseMixture(
            2,
            [0.5, 0.5],
            (
                WrappedComponent((0, 1), [0.3, 0.6], 0.01 * np.eye(2)),
                WrappedComponent((0,), [0.8], [[0.02]]),
            ),
        )

    def test_total_mass_one(self):
        rng = np.random.default_rng(2)
        model = self.make_model()
        batch = unit_batch(rng.uniform(0, 1, (40, 2)))
        resp = e_step_wrapped(model, batch)
        total = sum(b.sum(axis=1) for b in resp.blocks)
        np.testing.assert_allclose(total, 1.0, atol=1e-10)

    def test_center_offset_dominates(self):
        model = SparseMixture(1, [1.0], (WrappedComponent((0,), [0.5], [[0.01]]),))
        batch = unit_batch([[0.5]])
        resp = e_step_wrapped(model, batch)
        offsets = resp.offsets[0][:, 0]
        center = resp.blocks[0][0, offsets == 0]
        assert center[0] >= 1 - 1e-10

    def test_collapsing_offsets_gives_component_posterior(self):
        from spamm.model import component_log_pdf

        rng = np.random.default_rng(3)
        model = self.make_model()
        batch = unit_batch(rng.uniform(0, 1, (30, 2)))
        resp = e_step_wrapped(model, batch)
        collapsed = resp.component_posteriors()

        trunc = TruncationLevel(3)
        lognum = np.stack(
            [
                np.log(model.alpha[k]) + component_log_pdf(c, batch.points, trunc)
                for k, c in enumerate(model.components)
            ],
            axis=1,
        )
        from scipy.special import logsumexp

        direct = np.exp(lognum - logsumexp(lognum, axis=1)[:, None])
        np.testing.assert_allclose(collapsed, direct, atol=1e-12)


class TestMStepWrapped:
    def test_point_mass_collapses_to_jitter_floor(self):
        model = SparseMixture(1, [1.0], (WrappedComponent((0,), [0.4], [[0.01]]),))
        batch = unit_batch(np.full((30, 1), 0.37))
        resp = e_step_wrapped(model, batch)
        new = m_step_wrapped(model, batch, resp)
        assert new.components[0].mu[0] == pytest.approx(0.37, abs=1e-12)
        assert new.components[0].sigma[0, 0] < 1e-7

    def test_center_responsibilities_give_euclidean_mle(self):
        rng = np.random.default_rng(4)
        pts = 0.5 + 0.05 * rng.standard_normal((60, 2))
        w = rng.uniform(0.5, 2.0, 60)
        batch = WeightedSampleBatch(pts, w)
        model = SparseMixture(2, [1.0], (WrappedComponent((0, 1), [0.5, 0.5], 0.01 * np.eye(2)),))
        offsets = lattice_offsets(2, 1)
        block = np.zeros((60, offsets.shape[0]))
        block[:, int(np.flatnonzero((offsets == 0).all(axis=1))[0])] = 1.0
        resp = WrappedResponsibilities(blocks=[block], offsets=[offsets])
        new = m_step_wrapped(model, batch, resp)

        wsum = batch.weights.sum()
        mean = batch.weights @ batch.points / wsum
        dev = batch.points - mean
        cov = (dev * batch.weights[:, None]).T @ dev / wsum
        np.testing.assert_allclose(new.components[0].mu, mean, atol=1e-12)
        np.testing.assert_allclose(new.components[0].sigma, cov, atol=1e-12)

    def test_mu_wraps_into_unit_interval(self):
        model = SparseMixture(1, [1.0], (WrappedComponent((0,), [0.98], [[0.01]]),))
        pts = np.mod(0.98 + 0.05 * np.random.default_rng(8).standard_normal((400, 1)), 1.0)
        batch = unit_batch(pts)
        new = m_step_wrapped(model, batch, e_step_wrapped(model, batch))
        mu = new.components[0].mu[0]
        assert 0.0 <= mu < 1.0
        assert min(abs(mu - 0.98), 1 - abs(mu - 0.98)) < 0.02


class TestEStepDiag:
    def make_model(self):
        return SparseMixture(
            2,
            [0.6, 0.4],
            (
                DiagWrappedComponent((0, 1), [0.3, 0.6], [0.01, 0.02]),
                DiagWrappedComponent((1,), [0.8], [0.015]),
            ),
        )

    def test_offset_marginals_agree_across_coordinates(self):
        rng = np.random.default_rng(5)
        model = self.make_model()
        batch = unit_batch(rng.uniform(0, 1, (25, 2)))
        resp = e_step_diag(model, batch)
        for k, comp in enumerate(model.components):
            sums = resp.blocks[k].sum(axis=2)  # (N, n_k)
            for j in range(len(comp.u)):
                np.testing.assert_allclose(sums[:, j], resp.beta[:, k], atol=1e-10)

    def test_single_component_mass_one(self):
        model = SparseMixture(1, [1.0], (DiagWrappedComponent((0,), [0.5], [0.01]),))
        batch = unit_batch(np.linspace(0, 0.99, 13)[:, None])
        resp = e_step_diag(model, batch)
        np.testing.assert_allclose(resp.blocks[0].sum(axis=2)[:, 0], 1.0, atol=1e-12)

    def test_matches_full_lattice_oracle(self):
        rng = np.random.default_rng(6)
        batch = unit_batch(rng.uniform(0, 1, (20, 2)))
        diag_model = self.make_model()
        wrapped_model = SparseMixture(
            2,
            diag_model.alpha,
            tuple(
                WrappedComponent(c.u, c.mu, np.diag(c.sigma2))
                for c in diag_model.components
            ),
        )
        resp_d = e_step_diag(diag_model, batch)
        resp_w = e_step_wrapped(wrapped_model, batch)
        for k, comp in enumerate(diag_model.components):
            offsets = resp_w.offsets[k]
            for j in range(len(comp.u)):
                for mi, m in enumerate(resp_d.m_offsets):
                    collapsed = resp_w.blocks[k][:, offsets[:, j] == m].sum(axis=1)
                    np.testing.assert_allclose(
                        resp_d.blocks[k][:, j, mi], collapsed, atol=1e-10
                    )


class TestMStepDiag:
    def test_alpha_consistent_across_coordinates(self):
        rng = np.random.default_rng(7)
        model = TestEStepDiag().make_model()
        batch = WeightedSampleBatch(rng.uniform(0, 1, (50, 2)), rng.uniform(0.5, 2, 50))
        resp = e_step_diag(model, batch)
        new = m_step_diag(model, batch, resp)
        n = batch.n
        for k, comp in enumerate(model.components):
            for j in range(len(comp.u)):
                gamma_mass = float(batch.weights @ resp.blocks[k][:, j, :].sum(axis=1)) / n
                assert new.alpha[k] == pytest.approx(gamma_mass, abs=1e-10)

    def test_agrees_with_full_wrapped_on_diagonal(self):
        rng = np.random.default_rng(9)
        diag_model = TestEStepDiag().make_model()
        wrapped_model = SparseMixture(
            2,
            diag_model.alpha,
            tuple(WrappedComponent(c.u, c.mu, np.diag(c.sigma2)) for c in diag_model.components),
        )
        batch = unit_batch(rng.uniform(0, 1, (80, 2)))
        new_d = m_step_diag(diag_model, batch, e_step_diag(diag_model, batch))
        new_w = m_step_wrapped(wrapped_model, batch, e_step_wrapped(wrapped_model, batch))
        np.testing.assert_allclose(new_d.alpha, new_w.alpha, atol=1e-10)
        for cd, cw in zip(new_d.components, new_w.components):
            np.testing.assert_allclose(cd.mu, cw.mu, atol=1e-8)
            np.testing.assert_allclose(cd.sigma2, np.diag(cw.sigma), atol=1e-8)

    def test_uniform_component_tracks_posterior_mass(self):
        model = SparseMixture(
            1,
            [0.5, 0.5],
            (
                DiagWrappedComponent((0,), [0.5], [0.01]),
                DiagWrappedComponent((), np.zeros(0), np.zeros(0)),
            ),
        )
        batch = unit_batch(np.full((40, 1), 0.5))
        resp = e_step_diag(model, batch)
        new = m_step_diag(model, batch, resp)
        expected = float(batch.weights @ resp.beta[:, 1]) / batch.n
        assert new.components[1].u == ()
        assert new.alpha[1] == pytest.approx(expected, abs=1e-12)


class TestEmStep:
    @pytest.mark.parametrize("family", ["wrapped", "diag", "vonmises"])
    def test_descent_on_random_instances(self, family):
        rng = np.random.default_rng(123)
        for _ in range(12):
            model, batch = random_instance(rng, family, n=300)
            result = em_step(model, batch)
            assert result.nll_after <= result.nll_before + 1e-8

    def test_zero_weight_component_stays_zero(self):
        comp = VonMisesComponent((0,), [0.5], [3.0])
        dead = VonMisesComponent((0,), [0.1], [3.0])
        model = SparseMixture(1, [1.0, 0.0], (comp, dead))
        batch = unit_batch(np.random.default_rng(10).uniform(0, 1, (50, 1)))
        resp = e_step_von_mises(model, batch)
        np.testing.assert_array_equal(resp.beta[:, 1], 0.0)
        result = em_step(model, batch)
        assert result.model.alpha[1] == 0.0
        # Parameters frozen.
        np.testing.assert_array_equal(result.model.components[1].mu, dead.mu)

    def test_fixed_point_is_stationary(self):
        truth = SparseMixture(
            1,
            [0.5, 0.5],
            (
                VonMisesComponent((0,), [0.2], [80.0]),
                VonMisesComponent((0,), [0.7], [80.0]),
            ),
        )
        batch = sample(truth, 400, rng_seed=11)
        model = SparseMixture(
            1,
            [0.4, 0.6],
            (
                VonMisesComponent((0,), [0.25], [30.0]),
                VonMisesComponent((0,), [0.65], [30.0]),
            ),
        )
        prev = None
        for _ in range(3000):
            model = em_step(model, batch).model
            flat = np.concatenate(
                [model.alpha] + [np.concatenate([c.mu, c.kappa]) for c in model.components]
            )
            if prev is not None and np.max(np.abs(flat - prev)) < 1e-12:
                break
            prev = flat
        after = em_step(model, batch).model
        flat_after = np.concatenate(
            [after.alpha] + [np.concatenate([c.mu, c.kappa]) for c in after.components]
        )
        assert np.max(np.abs(flat_after - prev)) < 1e-9

    @pytest.mark.parametrize("family", ["wrapped", "diag"])
    def test_em_step_matches_public_ops(self, family):
        # The fused update used by em_step must agree with the explicit
        # e-step / m-step composition.
        rng = np.random.default_rng(14)
        model, batch = random_instance(rng, family, d=2, k=3, n=120)
        fused = em_step(model, batch).model
        if family == "wrapped":
            explicit = m_step_wrapped(model, batch, e_step_wrapped(model, batch))
        else:
            explicit = m_step_diag(model, batch, e_step_diag(model, batch))
        np.testing.assert_allclose(fused.alpha, explicit.alpha, atol=1e-12)
        for cf, ce in zip(fused.components, explicit.components):
            np.testing.assert_allclose(cf.mu, ce.mu, atol=1e-11)
