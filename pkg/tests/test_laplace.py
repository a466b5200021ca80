import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from bayeshdsa.exceptions import NegativeVarianceWarning, RankExhausted
from bayeshdsa.ghep import EigenPairs, GhepConfig, solve_ghep
from bayeshdsa.laplace import LaplacePosterior, dense_posterior_cov, diag_pp, low_rank_error_bound
from bayeshdsa.linops import DenseSpdOperator, diagonal_operator, identity_operator
from bayeshdsa.models import build_linear_model

from conftest import random_spd


def all_pairs(problem, z=None):
    z = problem.prior_mean_z if z is None else z
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankExhausted)
        return solve_ghep(problem.misfit_hessian_operator(z), problem.prior_cov_z,
                          GhepConfig(r0=problem.m, delta_r=1, oversampling=0, lambda_min=1e-8))


def fitted(problem, rank=None):
    z = problem.map_closed_form()
    eig = all_pairs(problem, z)
    return LaplacePosterior(rank).fit(problem, z, eig), eig


def dense_post(problem):
    return dense_posterior_cov(problem.prior_cov_z_matrix, problem.misfit_hessian_matrix())


def identity_posterior(m, values, vectors, mean=None, map_point=None):
    mean = np.zeros(m) if mean is None else mean
    map_point = np.zeros(m) if map_point is None else map_point
    eig = EigenPairs(np.asarray(values, float), np.asarray(vectors, float).reshape(m, -1))
    return LaplacePosterior().fit_components(map_point, mean, identity_operator(m), eig)


def cov_standard_errors(cov, n):
    d = np.diag(cov)
    return np.sqrt((np.outer(d, d) + cov ** 2) / n)


class TestCovariance:
    def test_rank_zero_is_prior(self, rng):
        p = build_linear_model(8, 2, 6, seed=1)
        lp, _ = fitted(p, rank=0)
        x = rng.standard_normal(8)
        assert lp.apply_posterior_cov(x).tobytes() == p.prior_cov_z.apply(x).tobytes()

    @pytest.mark.parametrize("seed", range(3))
    def test_full_rank_matches_dense(self, seed):
        p = build_linear_model(12, 3, 15, seed=seed)
        lp, eig = fitted(p, rank=12)
        exact = dense_post(p)
        got = lp.posterior_cov_dense()
        assert np.linalg.norm(got - exact) <= 1e-8 * np.linalg.norm(exact)

    def test_single_unit_pair(self):
        v = np.array([0.6, 0.0, 0.8])
        lp = identity_posterior(3, [1.0], v)
        np.testing.assert_allclose(lp.apply_posterior_cov(v), 0.5 * v, rtol=1e-15)
        np.testing.assert_allclose(lp.d_r_, [0.5])

    @pytest.mark.parametrize("r", [0, 2, 5, 9])
    def test_truncation_error_bounded_by_tail_sum(self, r):
        p = build_linear_model(12, 2, 9, seed=3)
        lp, eig = fitted(p, rank=r)
        diff = lp.posterior_cov_dense() - dense_post(p)
        root = np.real(sla.sqrtm(p.prior_cov_z_matrix))
        whitened = np.linalg.solve(root, np.linalg.solve(root, diff).T)
        bound = low_rank_error_bound(eig.values, r)
        assert np.linalg.norm(whitened, 2) <= bound * (1 + 1e-8) + 1e-12
        np.testing.assert_allclose(np.trace(whitened), bound, rtol=1e-8, atol=1e-12)

    def test_coefficients_in_unit_interval_and_increasing(self):
        lp = identity_posterior(3, [9.0, 1.0, 0.0], np.eye(3))
        for c in (lp.d_r_, lp.s_r_):
            assert np.all((c >= 0) & (c < 1)) and np.all(np.diff(c) <= 0)
        np.testing.assert_allclose(lp.s_r_, [1 - 1 / np.sqrt(10), 1 - 1 / np.sqrt(2), 0.0])

    @given(seed=st.integers(0, 2 ** 31), m=st.integers(1, 10), rank=st.integers(0, 10))
    def test_symmetric_positive_definite(self, seed, m, rank):
        p = build_linear_model(m, 2, max(m - 2, 1), seed=seed)
        lp, eig = fitted(p)
        lp = LaplacePosterior(min(rank, eig.size)).fit(p, lp.map_point_, eig)
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal(m), rng.standard_normal(m)
        cx, cy = lp.apply_posterior_cov(x), lp.apply_posterior_cov(y)
        assert abs(cx @ y - x @ cy) <= 1e-10 * max(1.0, np.linalg.norm(cx) * np.linalg.norm(y))
        assert x @ cx > 0

    def test_rank_above_available(self):
        p = build_linear_model(5, 2, 5, seed=0)
        eig = all_pairs(p).truncate(2)
        with pytest.raises(ValueError):
            LaplacePosterior(3).fit(p, p.map_closed_form(), eig)


class TestSampling:
    N = 100_000

    def test_identity_prior_mean(self, rng):
        mean = np.array([1.0, -2.0, 3.0])
        lp = identity_posterior(3, [1.0], np.array([1.0, 0.0, 0.0]), mean=mean)
        samples = lp.sample_prior(rng, self.N)
        se = 1.0 / np.sqrt(self.N)
        assert np.all(np.abs(samples.mean(axis=1) - mean) <= 4 * se)

    def test_scalar_variance(self, rng):
        eig = EigenPairs(np.zeros(0), np.zeros((1, 0)))
        lp = LaplacePosterior().fit_components(np.zeros(1), np.zeros(1),
                                               diagonal_operator(np.array([4.0])), eig)
        var = lp.sample_prior(rng, self.N).var()
        assert 3.8 <= var <= 4.2
        assert abs(var - 4.0) <= 5 * 4.0 * np.sqrt(2.0 / self.N)

    def test_prior_covariance(self, rng):
        cov = random_spd(rng, 5)
        eig = EigenPairs(np.zeros(0), np.zeros((5, 0)))
        lp = LaplacePosterior().fit_components(np.zeros(5), np.zeros(5), DenseSpdOperator(cov),
                                               eig)
        emp = np.cov(lp.sample_prior(rng, self.N))
        assert np.all(np.abs(emp - cov) <= 5 * cov_standard_errors(cov, self.N))

    def test_rank_zero_posterior_is_shifted_prior(self, rng):
        mean, zmap = rng.standard_normal(4), rng.standard_normal(4)
        eig = EigenPairs(np.zeros(0), np.zeros((4, 0)))
        lp = LaplacePosterior().fit_components(zmap, mean, identity_operator(4), eig)
        z = rng.standard_normal(4)
        np.testing.assert_allclose(lp.sample_posterior(z), zmap + (z - mean), rtol=1e-15)

    def test_large_eigenvalue_shrinks_fluctuation(self):
        v = np.array([0.0, 1.0, 0.0])
        lp = identity_posterior(3, [1e12], v)
        out = lp.sample_posterior(v)
        np.testing.assert_allclose(out, v / np.sqrt(1 + 1e12), rtol=1e-6)
        assert abs(np.linalg.norm(out) - 1e-6) <= 1e-12

    def test_deterministic_and_columnwise(self, rng):
        p = build_linear_model(6, 2, 5, seed=2)
        lp, _ = fitted(p)
        block = lp.sample_prior(rng, 3)
        cols = np.column_stack([lp.sample_posterior(block[:, k]) for k in range(3)])
        np.testing.assert_allclose(lp.sample_posterior(block), cols, rtol=1e-14)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_posterior_covariance_monte_carlo(self, seed):
        p = build_linear_model(8, 2, 6, seed=seed)
        lp, _ = fitted(p)
        rng = np.random.default_rng(seed)
        post = lp.sample_posterior(lp.sample_prior(rng, self.N))
        exact = dense_post(p)
        emp = np.cov(post)
        assert np.all(np.abs(emp - exact) <= 5 * cov_standard_errors(exact, self.N))
        se_mean = np.sqrt(np.diag(exact) / self.N)
        assert np.all(np.abs(post.mean(axis=1) - p.map_closed_form()) <= 5 * se_mean)

    def test_mahalanobis_chi_square(self):
        p = build_linear_model(10, 3, 7, seed=4)
        lp, _ = fitted(p)
        rng = np.random.default_rng(9)
        n = 10_000
        dev = lp.sample_posterior(lp.sample_prior(rng, n)) - p.map_closed_form()[:, None]
        chol = np.linalg.cholesky(dense_post(p))
        d2 = np.sum(sla.solve_triangular(chol, dev, lower=True) ** 2, axis=0)
        assert abs(d2.mean() - p.m) <= 5 * np.sqrt(2 * p.m / n)


def spd_with_spectrum(rng, values):
    q, _ = np.linalg.qr(rng.standard_normal((len(values), len(values))))
    return (q * values) @ q.T


class TestVariance:
    def test_exact_matches_dense(self):
        p = build_linear_model(10, 2, 8, seed=5)
        lp, _ = fitted(p)
        prior, post = lp.variances(exact=True)
        np.testing.assert_allclose(prior, np.diag(p.prior_cov_z_matrix), rtol=1e-13)
        np.testing.assert_allclose(post, np.diag(dense_post(p)), rtol=1e-12)
        assert np.all(post <= prior)

    def test_single_pair_hand_case(self):
        lp = identity_posterior(4, [1.0], np.eye(4)[:, 0])
        prior, post = lp.variances(exact=True)
        np.testing.assert_array_equal(prior, 1.0)
        np.testing.assert_array_equal(post, [0.5, 1.0, 1.0, 1.0])

    def test_diag_pp_accuracy(self, rng):
        a = spd_with_spectrum(rng, 1.0 / np.arange(1, 101) ** 2)
        est = diag_pp(lambda x: a @ x, 100, 90, rng)
        assert np.linalg.norm(est - np.diag(a)) <= 0.05 * np.linalg.norm(np.diag(a))

    def test_diag_pp_exact_for_low_rank(self, rng):
        a = spd_with_spectrum(rng, np.r_[np.ones(5), np.zeros(25)])
        est = diag_pp(lambda x: a @ x, 30, 18, rng)
        np.testing.assert_allclose(est, np.diag(a), atol=1e-12)

    def test_diag_pp_budget(self, rng):
        calls = []

        def apply(x):
            calls.append(x.shape[1])
            return x
        diag_pp(apply, 20, 30, rng)
        assert sum(calls) == 30 and calls == [10, 10, 10]
        with pytest.raises(ValueError):
            diag_pp(apply, 20, 2, rng)

    def test_estimated_path_uses_budget(self, rng):
        cov = random_spd(rng, 40)
        eig = EigenPairs(np.zeros(0), np.zeros((40, 0)))
        lp = LaplacePosterior().fit_components(np.zeros(40), np.zeros(40),
                                               DenseSpdOperator(cov), eig)
        prior, post = lp.variances(s_D=120, rng=np.random.default_rng(0))
        assert np.linalg.norm(prior - np.diag(cov)) <= 0.05 * np.linalg.norm(np.diag(cov))
        np.testing.assert_array_equal(prior, post)

    def test_negative_values_are_clamped(self):
        # deliberately inconsistent pair: correction 4 * 0.5 exceeds prior variance 1
        lp = identity_posterior(2, [1.0], np.array([2.0, 0.0]))
        with pytest.warns(NegativeVarianceWarning):
            prior, post = lp.variances(exact=True)
        np.testing.assert_array_equal(post, [0.0, 1.0])
