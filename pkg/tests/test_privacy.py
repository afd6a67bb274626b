"""
Tests for zCDP accounting, noise and private selection
"""

import math
from collections import Counter

import numpy as np
import pytest

from rap_engine.engine.privacy import (
    GAUSSIAN,
    REPORT_NOISY_MAX,
    BudgetLedger,
    ErrorGapVector,
    active_mechanism,
    derive_rng,
    eps_delta_to_rho,
    gaussian_mechanism,
    gaussian_sigma,
    gumbel_from_uniform,
    gumbel_noise,
    gumbel_sample,
    mechanism_scope,
    oneshot_top_k,
    oneshot_top_k_stream,
    report_noisy_max,
    require_mechanism_scope,
    rho_to_eps,
)
from rap_engine.exceptions import BudgetAccountingError, PrivacyError, SensitiveAccessError
from rap_engine.utils.types import DpParams, ZcdpBudget

EULER_GAMMA = 0.5772156649015329


class TestConversion:
    """Test (epsilon, delta) <-> rho conversion."""

    def test_reference_value(self):
        rho = eps_delta_to_rho(DpParams(epsilon=1.0, delta=1e-6)).rho
        log_inv_delta = math.log(1e6)

        assert rho == pytest.approx(1.0 + 2 * (log_inv_delta - math.sqrt(log_inv_delta * (1.0 + log_inv_delta))), rel=1e-9)
        assert rho == pytest.approx(0.017462, rel=1e-3)

    def test_rho_to_eps(self):
        assert rho_to_eps(ZcdpBudget(rho=1.0), math.exp(-1)) == pytest.approx(3.0)

    def test_round_trip(self):
        for eps in (0.01, 0.1, 1.0, 10.0):
            for delta in (1e-12, 1e-9, 1e-6, 1e-3):
                rho = eps_delta_to_rho(DpParams(epsilon=eps, delta=delta))
                assert abs(rho_to_eps(rho, delta) - eps) <= 1e-9

    def test_small_epsilon(self):
        assert eps_delta_to_rho(DpParams(epsilon=1e-8, delta=1e-6)).rho < 1e-15

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            DpParams(epsilon=0.0, delta=1e-6)
        with pytest.raises(ValueError):
            DpParams(epsilon=1.0, delta=1.0)

    def test_invalid_delta(self):
        with pytest.raises(PrivacyError):
            rho_to_eps(ZcdpBudget(rho=1.0), 0.0)

    def test_split(self):
        shares = [ZcdpBudget(rho=0.3).split(4) for _ in range(4)]

        assert shares[0].rho == pytest.approx(0.075)
        assert sum(share.rho for share in shares) == pytest.approx(0.3, abs=1e-15)


class TestGaussianMechanism:
    """Test Gaussian noise."""

    def test_sigma(self):
        sigma = gaussian_sigma(48_842, ZcdpBudget(rho=0.1))

        assert sigma**2 == pytest.approx(2.096e-9, rel=1e-3)

    def test_not_clamped(self):
        noisy = gaussian_mechanism(np.zeros(1000), 10, ZcdpBudget(rho=1e-3), np.random.default_rng(0))

        assert (noisy < 0).any()
        assert (noisy > 1).any()

    def test_huge_budget(self):
        value = gaussian_mechanism(0.3, 1000, ZcdpBudget(rho=1e12), np.random.default_rng(0))

        assert isinstance(value, float)
        assert value == pytest.approx(0.3, abs=1e-6)

    @pytest.mark.slow
    def test_variance(self):
        budget = ZcdpBudget(rho=0.5)
        noisy = gaussian_mechanism(np.zeros(100_000), 20, budget, np.random.default_rng(1))

        assert noisy.var() == pytest.approx(1.0 / (2 * 20**2 * 0.5), rel=0.05)


class TestGumbel:
    """Test Gumbel sampling."""

    def test_inverse_cdf(self):
        assert gumbel_from_uniform(math.exp(-1), 2.0) == pytest.approx(0.0, abs=1e-15)

    def test_bad_scale(self):
        with pytest.raises(PrivacyError):
            gumbel_noise(0.0, 3, np.random.default_rng(0))

    def test_finite(self):
        assert np.isfinite(gumbel_noise(1.0, 10_000, np.random.default_rng(0))).all()

    def test_single_draw(self):
        first = gumbel_sample(1.5, np.random.default_rng(7))

        assert isinstance(first, float)
        assert first == gumbel_noise(1.5, 1, np.random.default_rng(7))[0]

    @pytest.mark.slow
    def test_mean(self):
        samples = gumbel_noise(3.0, 1_000_000, np.random.default_rng(2))

        assert samples.mean() == pytest.approx(EULER_GAMMA * 3.0, rel=0.02)


class TestSelection:
    """Test report-noisy-max and oneshot top-K."""

    def test_single_gap(self):
        gaps = ErrorGapVector(np.array([0.2]), np.array([17]))

        assert report_noisy_max(gaps, 10, ZcdpBudget(rho=1.0), np.random.default_rng(0)) == 17

    def test_huge_budget_argmax(self):
        gaps = ErrorGapVector(np.array([0.1, 0.4, 0.3, 0.05]), np.array([3, 8, 9, 12]))
        rng = np.random.default_rng(0)

        picks = [report_noisy_max(gaps, 100, ZcdpBudget(rho=1e12), rng) for _ in range(1000)]

        assert set(picks) == {8}

    def test_huge_budget_top_k(self):
        gaps = ErrorGapVector(np.array([0.1, 0.4, 0.3, 0.05, 0.2]), np.arange(5))
        rng = np.random.default_rng(0)

        for _ in range(1000):
            picked = oneshot_top_k(gaps, 3, 100, ZcdpBudget(rho=1e12), rng)
            assert picked.tolist() == [1, 2, 4]

    def test_k_equals_size(self):
        gaps = ErrorGapVector(np.array([0.1, 0.4, 0.3]), np.array([5, 6, 7]))

        picked = oneshot_top_k(gaps, 3, 10, ZcdpBudget(rho=0.1), np.random.default_rng(0))

        assert sorted(picked.tolist()) == [5, 6, 7]

    def test_k_too_large(self):
        gaps = ErrorGapVector(np.array([0.1]), np.array([0]))

        with pytest.raises(PrivacyError):
            oneshot_top_k(gaps, 2, 10, ZcdpBudget(rho=0.1), np.random.default_rng(0))

    def test_stream_matches_top_k(self):
        gaps = np.array([0.1, 0.4, 0.3, 0.05, 0.2, 0.6, 0.0])
        chunks = [ErrorGapVector(gaps[:3], np.arange(3)), ErrorGapVector(gaps[3:], np.arange(3, 7))]

        picked = oneshot_top_k_stream(chunks, 3, 100, ZcdpBudget(rho=1e12), np.random.default_rng(0))

        assert picked.tolist() == [5, 1, 2]

    def test_stream_too_few(self):
        chunks = [ErrorGapVector(np.array([0.1]), np.array([0]))]

        with pytest.raises(PrivacyError):
            oneshot_top_k_stream(chunks, 2, 10, ZcdpBudget(rho=0.1), np.random.default_rng(0))

    def test_negative_gap(self):
        with pytest.raises(PrivacyError):
            ErrorGapVector(np.array([-0.1]), np.array([0]))

    def test_without(self):
        gaps = ErrorGapVector(np.array([0.1, 0.4]), np.array([3, 8]))

        assert gaps.without(8).indices.tolist() == [3]

    @pytest.mark.slow
    def test_equal_gaps_split_evenly(self):
        gaps = ErrorGapVector(np.array([0.3, 0.3]), np.array([0, 1]))
        rng = np.random.default_rng(3)

        picks = Counter(report_noisy_max(gaps, 10, ZcdpBudget(rho=0.5), rng) for _ in range(100_000))

        assert picks[0] / 100_000 == pytest.approx(0.5, abs=0.02)

    @pytest.mark.slow
    def test_noisy_max_is_softmax(self):
        """Gumbel-max selection probabilities follow exp(gap / scale)."""
        gaps = np.array([0.0, 0.1, 0.2])
        n, rho = 10, 0.5
        scale = 1.0 / math.sqrt(2 * rho * n * n)
        rng = np.random.default_rng(4)
        trials = 50_000

        picks = Counter(report_noisy_max(ErrorGapVector(gaps, np.arange(3)), n, ZcdpBudget(rho=rho), rng) for _ in range(trials))

        weights = np.exp(gaps / scale)
        expected = weights / weights.sum()
        for index in range(3):
            assert picks[index] / trials == pytest.approx(expected[index], abs=0.01)


class TestBudgetLedger:
    """Test budget bookkeeping."""

    def test_totals(self):
        ledger = BudgetLedger()
        ledger.charge(GAUSSIAN, 0.01, count=10)
        ledger.charge(REPORT_NOISY_MAX, 0.05)
        ledger.charge(REPORT_NOISY_MAX, 0.05)

        assert ledger.total == pytest.approx(0.2)
        assert ledger.totals_by_mechanism() == {GAUSSIAN: pytest.approx(0.1), REPORT_NOISY_MAX: pytest.approx(0.1)}

    def test_zero_count_ignored(self):
        ledger = BudgetLedger()
        ledger.charge(GAUSSIAN, 0.1, count=0)

        assert ledger.entries == []

    def test_negative_charge(self):
        with pytest.raises(BudgetAccountingError):
            BudgetLedger().charge(GAUSSIAN, -0.1)

    def test_composition_check(self):
        ledger = BudgetLedger()
        ledger.charge(GAUSSIAN, 0.1 / 3, count=3)

        ledger.assert_composes_to(0.1)
        with pytest.raises(BudgetAccountingError):
            ledger.assert_composes_to(0.11)

    def test_rows(self):
        ledger = BudgetLedger()
        ledger.charge(GAUSSIAN, 0.2, count=2)

        assert BudgetLedger.from_rows(ledger.to_rows()) == ledger


class TestMechanismScope:
    """Test the sensitive-access marker."""

    def test_outside_scope(self):
        with pytest.raises(SensitiveAccessError):
            require_mechanism_scope()

    def test_nested_scopes(self):
        with mechanism_scope(GAUSSIAN):
            with mechanism_scope(REPORT_NOISY_MAX):
                assert active_mechanism() == REPORT_NOISY_MAX
            assert active_mechanism() == GAUSSIAN
            require_mechanism_scope()
        assert active_mechanism() is None

    def test_guarded_dataset(self, dataset):
        dataset.add_access_observer(require_mechanism_scope)

        with mechanism_scope(GAUSSIAN):
            dataset.records
        with pytest.raises(SensitiveAccessError):
            dataset.records


class TestDeriveRng:
    """Test seed derivation."""

    def test_streams(self):
        a = derive_rng(5, 0).random(4)
        b = derive_rng(5, 0).random(4)
        c = derive_rng(5, 1).random(4)

        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
