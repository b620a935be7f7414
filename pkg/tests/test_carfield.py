import numpy as np
import pytest

from periofactor import (CarStructure, PrecisionGaussian, build_mouth_graph,
                         car_log_density, car_precision, path_graph,
                         quadratic_form, sample_precision_gaussian)
from periofactor.carfield import sample_precision_gaussian_batch
from periofactor.errors import DomainError, NumericalError

LOG_2PI = np.log(2 * np.pi)


@pytest.fixture(scope="module")
def car2():
    return CarStructure(path_graph(2))


@pytest.fixture(scope="module")
def car3():
    return CarStructure(path_graph(3))


@pytest.fixture(scope="module")
def car42():
    return CarStructure(build_mouth_graph(7, 1, 1))


class TestPrecision:
    def test_two_site_identity_at_rho_zero(self, car2):
        assert np.array_equal(car_precision(car2, 0.0), np.eye(2))

    def test_two_site_path(self, car2):
        assert np.array_equal(car_precision(car2, 0.5),
                              [[1.0, -0.5], [-0.5, 1.0]])

    def test_three_site_path(self, car3):
        expected = [[1.0, -0.9, 0.0], [-0.9, 2.0, -0.9], [0.0, -0.9, 1.0]]
        assert np.allclose(car_precision(car3, 0.9), expected)

    def test_rho_domain(self, car2):
        with pytest.raises(DomainError):
            car_precision(car2, 1.0)
        with pytest.raises(DomainError):
            car_precision(car2, -0.1)

    def test_positive_definite_near_one(self, car42):
        q = car_precision(car42, 1.0 - 1e-8)
        np.linalg.cholesky(q)  # raises if not PD

    def test_conditional_moment_identity(self):
        # -Q_ss'/Q_ss = rho/m(s) for neighbors, 1/Q_ss = 1/m(s), all grids
        for grid in (1, 2, 3):
            g = build_mouth_graph(7, 1, grid)
            car = CarStructure(g)
            for rho in (0.3, 0.95):
                q = car.precision(rho)
                m = g.degrees.astype(float)
                assert np.allclose(np.diag(q), m)
                adj = g.adjacency()
                ratio = -q / np.diag(q)[:, None]
                assert np.allclose(ratio[adj > 0],
                                   (rho / m[:, None] * adj)[adj > 0])


class TestLogDeterminant:
    def test_matches_dense_cholesky_s42(self, car42):
        for rho in (0.0, 0.5, 0.99):
            dense = 2.0 * np.log(np.diag(
                np.linalg.cholesky(car42.precision(rho)))).sum()
            assert abs(car42.log_det(rho) - dense) < 1e-8

    def test_rho_zero_is_sum_log_degrees(self, car42):
        assert np.isclose(car42.log_det(0.0),
                          np.log(car42.degrees).sum())

    def test_monotone_decreasing_in_rho(self, car42):
        grid = np.linspace(0.0, 0.999, 40)
        vals = [car42.log_det(r) for r in grid]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestLogDensity:
    def test_zero_residual_is_normalizing_constant(self, car3):
        for rho, tau2 in ((0.0, 1.0), (0.7, 2.5)):
            expected = (-1.5 * (LOG_2PI + np.log(tau2))
                        + 0.5 * car3.log_det(rho))
            assert np.isclose(car_log_density(np.zeros(3), rho, tau2, car3),
                              expected)

    def test_matches_dense_gaussian(self, car42):
        rng = np.random.default_rng(7)
        r = rng.standard_normal(42)
        rho, tau2 = 0.8, 1.7
        q = car42.precision(rho) / tau2
        sign, logdet = np.linalg.slogdet(q)
        dense = -21.0 * LOG_2PI + 0.5 * logdet - 0.5 * r @ q @ r
        assert np.isclose(car_log_density(r, rho, tau2, car42), dense)

    def test_domain_errors(self, car3):
        with pytest.raises(DomainError):
            car_log_density(np.zeros(3), 0.5, -1.0, car3)
        with pytest.raises(DomainError):
            car_log_density(np.zeros(3), 1.2, 1.0, car3)


class TestQuadraticForm:
    def test_constant_vector_near_icar_limit(self, car2):
        for eps in (1e-2, 1e-4, 1e-6):
            val = quadratic_form(np.ones(2), 1.0 - eps, car2)
            assert np.isclose(val, 2 * eps)

    def test_hand_value(self, car2):
        assert np.isclose(quadratic_form(np.array([1.0, -1.0]), 0.5, car2), 3.0)

    def test_unit_vector_picks_degree(self, car3):
        e1 = np.array([1.0, 0.0, 0.0])
        for rho in (0.0, 0.5, 0.99):
            assert np.isclose(quadratic_form(e1, rho, car3), 1.0)

    def test_matches_dense_and_batches(self, car42):
        rng = np.random.default_rng(3)
        r = rng.standard_normal((5, 42))
        for rho in (0.0, 0.6):
            q = car42.precision(rho)
            dense = np.einsum("ns,st,nt->n", r, q, r)
            assert np.allclose(quadratic_form(r, rho, car42), dense)

    def test_dimension_mismatch(self, car3):
        with pytest.raises(DomainError):
            quadratic_form(np.ones(4), 0.5, car3)

    def test_nonnegative(self, car42):
        rng = np.random.default_rng(11)
        r = rng.standard_normal((20, 42))
        assert (quadratic_form(r, 0.99, car42) >= 0).all()


class TestPrecisionGaussianSampling:
    def test_standard_normal_mean(self):
        g = PrecisionGaussian(np.eye(3), np.zeros(3))
        rng = np.random.default_rng(0)
        draws = np.array([sample_precision_gaussian(g, rng)
                          for _ in range(100_000)])
        assert (np.abs(draws.mean(axis=0)) < 4.0 / np.sqrt(len(draws))).all()

    def test_scalar_gaussian_moments(self):
        g = PrecisionGaussian(np.array([[4.0]]), np.array([4.0]))
        rng = np.random.default_rng(1)
        draws = np.array([sample_precision_gaussian(g, rng)[0]
                          for _ in range(100_000)])
        se_mean = 0.5 / np.sqrt(len(draws))
        assert abs(draws.mean() - 1.0) < 4 * se_mean
        assert abs(draws.var() - 0.25) < 0.01

    def test_covariance_matches_dense_inverse(self, car3):
        q = car3.precision(0.5) + np.eye(3)
        b = np.array([0.3, -1.0, 2.0])
        g = PrecisionGaussian(q, b)
        rng = np.random.default_rng(2)
        n = 100_000
        draws = np.array([sample_precision_gaussian(g, rng) for _ in range(n)])
        cov = np.linalg.inv(q)
        emp = np.cov(draws.T)
        se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n)
        assert (np.abs(emp - cov) < 3 * se + 1e-12).all()
        mean_se = np.sqrt(np.diag(cov) / n)
        assert (np.abs(draws.mean(axis=0) - cov @ b) < 4 * mean_se).all()

    def test_mean_recovered_from_shift(self):
        # precision Q with shift Q m has mean m exactly
        rng = np.random.default_rng(5)
        a = rng.standard_normal((4, 4))
        q = a @ a.T + 4 * np.eye(4)
        m = rng.standard_normal(4)
        g = PrecisionGaussian(q, q @ m)
        assert np.allclose(g.mean(), m)
        draws = np.array([g.sample(rng) for _ in range(50_000)])
        se = np.sqrt(np.diag(np.linalg.inv(q)) / len(draws))
        assert (np.abs(draws.mean(axis=0) - m) < 4 * se).all()

    def test_not_positive_definite_raises(self):
        g = PrecisionGaussian(np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros(2))
        with pytest.raises(NumericalError):
            g.sample(np.random.default_rng(0))

    def test_batch_matches_single(self, car3):
        rng = np.random.default_rng(9)
        precs = np.stack([car3.precision(r) + np.eye(3) for r in (0.1, 0.8)])
        shifts = rng.standard_normal((2, 3))
        noise = rng.standard_normal((2, 3))
        batch = sample_precision_gaussian_batch(precs, shifts, noise)
        for i in range(2):
            g = PrecisionGaussian(precs[i], shifts[i])
            lower = np.linalg.cholesky(precs[i])
            t = np.linalg.solve(lower, shifts[i])
            single = np.linalg.solve(lower.T, t + noise[i])
            assert np.allclose(batch[i], single)
            assert np.allclose(batch[i] - np.linalg.solve(lower.T, noise[i]),
                               g.mean())
