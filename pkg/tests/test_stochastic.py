import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtr

from periofactor import (RngStream, beta_draw, gamma_draw, inverse_gamma_draw,
                         normal_draw, truncated_normal)
from periofactor.errors import DomainError


def lower_trunc_moments(a):
    """Mean and variance of a standard normal conditioned on z > a."""
    lam = stats.norm.pdf(a) / ndtr(-a)
    return lam, 1.0 + a * lam - lam ** 2


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(42, 1, 3).gen.standard_normal(10)
        b = RngStream(42, 1, 3).gen.standard_normal(10)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(42, 1).gen.standard_normal(1000)
        b = RngStream(42, 2).gen.standard_normal(1000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.1

    def test_spawn_matches_direct_path(self):
        a = RngStream(7).spawn(1, 5).gen.standard_normal(4)
        b = RngStream(7, 1, 5).gen.standard_normal(4)
        assert np.array_equal(a, b)


class TestTruncatedNormal:
    def test_half_normal_mean(self):
        rng = RngStream(0).gen
        draws = truncated_normal(np.zeros(100_000), 1.0, "above0", rng)
        mean, var = lower_trunc_moments(0.0)
        assert abs(mean - np.sqrt(2 / np.pi)) < 1e-12
        se = np.sqrt(var / len(draws))
        assert abs(draws.mean() - mean) < 3 * se

    def test_inactive_truncation_matches_normal(self):
        rng = RngStream(1).gen
        draws = truncated_normal(np.full(10_000, 10.0), 1.0, "above0", rng)
        d, _ = stats.kstest(draws, stats.norm(10.0, 1.0).cdf)
        assert d < 0.01

    def test_deep_tail_stability(self):
        rng = RngStream(2).gen
        for m in (-4.5, -6.0, -8.0):
            draws = truncated_normal(np.full(10_000, m), 1.0, "above0", rng)
            assert np.isfinite(draws).all()
            assert (draws > 0).all()
            mean, var = lower_trunc_moments(-m)
            se = np.sqrt(var / len(draws))
            assert abs(draws.mean() - (m + mean)) < 4 * se

    def test_sign_always_matches_side(self):
        rng = RngStream(3).gen
        means = rng.normal(0, 4, size=20_000)
        assert (truncated_normal(means, 1.5, "above0", rng) > 0).all()
        assert (truncated_normal(means, 1.5, "below0", rng) < 0).all()

    def test_below0_mirrors_above0_distribution(self):
        lo = truncated_normal(np.full(50_000, 1.0), 2.0, "below0",
                              RngStream(4).gen)
        hi = truncated_normal(np.full(50_000, -1.0), 2.0, "above0",
                              RngStream(5).gen)
        d, _ = stats.kstest(lo, -hi)
        assert d < 0.02

    def test_two_sided_moments_general_case(self):
        # mean 2, sd 3, above0: standardized bound a=-2/3
        rng = RngStream(6).gen
        draws = truncated_normal(np.full(200_000, 2.0), 3.0, "above0", rng)
        mean, var = lower_trunc_moments(-2.0 / 3.0)
        target = 2.0 + 3.0 * mean
        se = 3.0 * np.sqrt(var / len(draws))
        assert abs(draws.mean() - target) < 3 * se

    def test_scalar_api(self):
        x = truncated_normal(-3.0, 1.0, "above0", RngStream(7).gen)
        assert isinstance(x, float) and x > 0

    def test_bad_arguments(self):
        rng = RngStream(8).gen
        with pytest.raises(DomainError):
            truncated_normal(0.0, 0.0, "above0", rng)
        with pytest.raises(DomainError):
            truncated_normal(0.0, 1.0, "sideways", rng)


class TestScalarDraws:
    def test_gamma_rate_parameterization(self):
        rng = RngStream(10).gen
        draws = np.array([gamma_draw(1.0, 4.0, rng) for _ in range(50_000)])
        se = 0.25 / np.sqrt(len(draws))  # Exp(4): mean = sd = 1/4
        assert abs(draws.mean() - 0.25) < 4 * se

    def test_inverse_gamma_mean(self):
        rng = RngStream(11).gen
        draws = np.array([inverse_gamma_draw(3.0, 2.0, rng)
                          for _ in range(100_000)])
        # mean b/(a-1) = 1, var b^2/((a-1)^2 (a-2)) = 1
        se = 1.0 / np.sqrt(len(draws))
        assert abs(draws.mean() - 1.0) < 4 * se

    def test_inverse_gamma_equals_reciprocal_gamma(self):
        a = np.array([inverse_gamma_draw(2.5, 1.5, RngStream(12).gen)
                      for _ in range(5)])
        b = np.array([1.0 / gamma_draw(2.5, 1.5, RngStream(12).gen)
                      for _ in range(5)])
        assert np.allclose(a, b)

    def test_beta_proposal_mean(self):
        # Beta(50 rho, 50 (1-rho)) has mean rho
        rng = RngStream(13).gen
        for rho in (0.2, 0.9):
            draws = np.array([beta_draw(50 * rho, 50 * (1 - rho), rng)
                              for _ in range(20_000)])
            var = rho * (1 - rho) / 51.0
            assert abs(draws.mean() - rho) < 3 * np.sqrt(var / len(draws))

    def test_normal_draw(self):
        rng = RngStream(14).gen
        draws = normal_draw(np.full(50_000, 2.0), 0.5, rng)
        assert abs(draws.mean() - 2.0) < 4 * 0.5 / np.sqrt(len(draws))

    def test_domain_errors(self):
        rng = RngStream(15).gen
        with pytest.raises(DomainError):
            gamma_draw(-1.0, 1.0, rng)
        with pytest.raises(DomainError):
            gamma_draw(1.0, 0.0, rng)
        with pytest.raises(DomainError):
            beta_draw(0.0, 1.0, rng)
        with pytest.raises(DomainError):
            normal_draw(0.0, -1.0, rng)
