"""Tests for segment bookkeeping, moment learning, and ensemble sampling."""

import numpy as np
import pytest

from solbat import ensemble
from solbat.ensemble import (
    EnsembleSet,
    MomentSet,
    generate_ensemble,
    learn_moments,
    persistence_forecast,
    segment_of,
)
from solbat.errors import InsufficientHistoryError


class TestSegmentOf:
    def test_first_instant_of_day(self):
        assert segment_of(0.0, 12) == 1

    def test_mid_morning(self):
        assert segment_of(3.5, 12) == 2

    def test_last_segment(self):
        assert segment_of(23.99, 12) == 12

    def test_wraps_across_days(self):
        assert segment_of(24.0, 12) == 1
        assert segment_of(155.0, 12) == segment_of(11.0, 12)

    def test_partition_tiles_the_day(self):
        ts = np.arange(0.0, 48.0, 0.25)
        segs = np.array([segment_of(t, 12) for t in ts])
        assert segs.min() == 1 and segs.max() == 12
        counts = np.bincount(segs[ts < 24.0])[1:]
        assert np.all(counts == 8)  # 2h segments at 15-min resolution


class TestLearnMoments:
    def test_scalar_hand_example(self):
        times = np.array([1.0, 25.0, 49.0])     # same segment on 3 days
        errors = np.array([[1.0], [2.0], [3.0]])
        ms = learn_moments(times, errors, segment_of(1.0, 12), 12, 4)
        assert ms.mu[0] == pytest.approx(2.0)
        assert ms.sigma[0, 0] == pytest.approx(1.0)
        assert ms.n_samples == 3

    def test_identical_samples_zero_variance(self):
        times = np.array([2.0, 26.0, 50.0])
        errors = np.full((3, 4), 0.7)
        ms = learn_moments(times, errors, segment_of(2.0, 12), 12, 4)
        np.testing.assert_allclose(ms.mu, 0.7)
        np.testing.assert_allclose(ms.sigma, 0.0, atol=1e-15)

    def test_empty_match_raises(self):
        times = np.array([1.0, 2.0])
        errors = np.zeros((2, 4))
        with pytest.raises(InsufficientHistoryError):
            learn_moments(times, errors, 12, 12, 2)

    def test_window_excludes_stale_samples(self):
        # two fresh + one stale sample in the same segment; stale one ignored
        times = np.array([1.0, 73.0, 97.0])
        errors = np.array([[100.0], [1.0], [3.0]])
        ms = learn_moments(times, errors, 1, 12, 2)
        assert ms.n_samples == 2
        assert ms.mu[0] == pytest.approx(2.0)

    def test_unbiased_estimates_converge(self):
        rng = np.random.default_rng(42)
        mu_true = np.array([0.5, -0.2, 0.05, 1.5])
        a = rng.normal(size=(4, 4))
        sigma_true = a @ a.T / 4.0 + np.eye(4) * 0.01
        n = 400
        times = np.arange(n) * 24.0 + 3.0  # same segment every day
        chol = np.linalg.cholesky(sigma_true)
        errors = mu_true + rng.standard_normal((n, 4)) @ chol.T
        ms = learn_moments(times, errors, segment_of(3.0, 12), 12, n + 1)
        assert ms.n_samples == n
        # three-sigma bands of the sample estimators
        se = np.sqrt(np.diag(sigma_true) / n)
        assert np.all(np.abs(ms.mu - mu_true) < 3.0 * se)
        rel = np.linalg.norm(ms.sigma - sigma_true) / np.linalg.norm(sigma_true)
        assert rel < 0.25


class TestGenerateEnsemble:
    def _nominal(self, n=8):
        t = np.arange(n) * 0.25
        return np.column_stack([
            np.maximum(0.0, 4.0 * np.sin(t)), 1.0 + 0.1 * t,
            0.2 + 0.0 * t, 298.0 + t])

    def test_degenerate_distribution_returns_nominal(self):
        nominal = self._nominal()
        ms = MomentSet(1, np.zeros(4), np.zeros((4, 4)), 10)
        ens = generate_ensemble(nominal, [ms] * len(nominal), 5, seed=1)
        for j in range(5):
            np.testing.assert_array_equal(ens.members[j], nominal)

    def test_zero_covariance_ignores_seed(self):
        nominal = self._nominal()
        ms = MomentSet(1, np.array([0.1, 0.0, 0.0, 0.0]), np.zeros((4, 4)), 10)
        a = generate_ensemble(nominal, [ms] * len(nominal), 4, seed=1)
        b = generate_ensemble(nominal, [ms] * len(nominal), 4, seed=999)
        np.testing.assert_array_equal(a.members, b.members)

    def test_single_member_is_nominal(self):
        nominal = self._nominal()
        ms = MomentSet(1, np.full(4, 2.0), np.eye(4), 10)
        ens = generate_ensemble(nominal, [ms] * len(nominal), 1, seed=3)
        assert ens.m == 1
        np.testing.assert_array_equal(ens.members[0], nominal)

    def test_seed_reproducibility_bit_identical(self):
        nominal = self._nominal()
        ms = MomentSet(1, np.zeros(4), 0.04 * np.eye(4), 10)
        a = generate_ensemble(nominal, [ms] * len(nominal), 7, seed=11)
        b = generate_ensemble(nominal, [ms] * len(nominal), 7, seed=11)
        assert a.members.tobytes() == b.members.tobytes()
        c = generate_ensemble(nominal, [ms] * len(nominal), 7, seed=12)
        assert a.members.tobytes() != c.members.tobytes()

    def test_sample_statistics_match_requested_moments(self):
        m = 10000
        nominal = np.zeros((1, 4))
        nominal[0, 3] = 298.0
        mu = np.array([0.3, 0.3, 0.3, 0.3])
        sigma = 0.04 * np.eye(4)
        ms = MomentSet(1, mu, sigma, 50)
        ens = generate_ensemble(nominal, [ms], m, seed=5)
        errors = ens.members[:, 0, :] - nominal[0]
        bound = 3.0 * 0.2 / np.sqrt(m)
        # temperature column is unclamped gaussian; PV/load are floored at 0
        # but 0.3 +- 0.2 rarely goes negative, so means stay inside the band
        assert np.all(np.abs(errors.mean(axis=0) - mu) < 3.0 * bound)
        cov = np.cov(errors.T, ddof=1)
        rel = np.linalg.norm(cov - sigma) / np.linalg.norm(sigma)
        assert rel < 0.10

    def test_clamping_only_floors_pv_and_load(self):
        nominal = np.array([[0.5, 0.5, 0.0, 298.0]])
        ms = MomentSet(1, np.zeros(4), 4.0 * np.eye(4), 50)
        ens = generate_ensemble(nominal, [ms], 500, seed=9)
        assert ens.members[:, 0, 0].min() == 0.0   # PV floored
        assert ens.members[:, 0, 1].min() == 0.0   # load floored
        assert ens.members[:, 0, 2].min() < 0.0    # price may go negative
        upper = ens.members[:, 0, 0].max()
        assert upper > 0.5  # flooring never caps the upside

    def test_insufficient_history_steps_fall_back_to_nominal(self):
        nominal = self._nominal()
        ms = MomentSet(1, np.full(4, 5.0), np.zeros((4, 4)), 10)
        moments = [None] * 4 + [ms] * (len(nominal) - 4)
        ens = generate_ensemble(nominal, moments, 3, seed=2)
        np.testing.assert_array_equal(ens.members[1, :4], nominal[:4])
        assert np.all(ens.members[1, 4:, 2] == nominal[4:, 2] + 5.0)

    def test_bad_member_count_rejected(self):
        with pytest.raises(ValueError):
            generate_ensemble(self._nominal(), [None] * 8, 0, seed=1)


class TestPersistenceForecast:
    def test_constant_history(self):
        times = np.arange(0.0, 48.0, 0.25)
        values = np.full((times.size, 4), 3.3)
        horizon = np.arange(48.0, 60.0, 0.25)
        fc = persistence_forecast(times, values, horizon)
        np.testing.assert_array_equal(fc, np.full((horizon.size, 4), 3.3))

    def test_periodic_history_has_zero_error(self):
        times = np.arange(0.0, 72.0, 0.25)
        daily = np.sin(2.0 * np.pi * times / 24.0)
        values = np.column_stack([daily, daily, daily, daily])
        horizon = np.arange(48.0, 71.0, 0.25)
        fc = persistence_forecast(times, values, horizon)
        truth = np.column_stack([np.sin(2.0 * np.pi * horizon / 24.0)] * 4)
        np.testing.assert_allclose(fc, truth, atol=1e-12)

    def test_ramp_history_constant_error(self):
        times = np.arange(0.0, 72.0, 0.25)
        values = np.column_stack([times] * 4)
        horizon = np.arange(48.0, 60.0, 0.25)
        fc = persistence_forecast(times, values, horizon)
        np.testing.assert_allclose(fc - np.column_stack([horizon] * 4), -24.0,
                                   atol=1e-12)

    def test_missing_history_raises(self):
        times = np.arange(30.0, 48.0, 0.25)  # starts too late for t-24h
        values = np.zeros((times.size, 4))
        with pytest.raises(InsufficientHistoryError):
            persistence_forecast(times, values, np.array([48.0]))
