"""Low-rank Laplace approximation of the conditional posterior.

With generalized eigenpairs ``(lambda_k, v_k)`` of the misfit Hessian the
posterior covariance is approximated by

    Gamma_post = Gamma - V diag(lambda / (1 + lambda)) V^T,

which is exact when all nonzero eigenvalues are kept.
"""

import warnings

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_rng, check_vector
from .exceptions import NegativeVarianceWarning


def diag_pp(apply, dim, s_D, rng=None):
    """Diag++ estimate of the diagonal of a symmetric matrix.

    The budget of ``s_D`` products is split in thirds: a range sketch ``Q``,
    the exact diagonal of ``Q Q^T A``, and a Hutchinson estimate of the
    remainder with Gaussian test vectors.

    Parameters
    ----------
    apply : callable
        Maps a ``(dim, k)`` block to the product with the matrix.
    dim : int
    s_D : int
        Total number of matrix-vector products, at least 3.
    rng : seed or Generator, optional
    """
    s_D = check_int(s_D, "s_D", 3)
    rng = check_rng(rng)
    k = s_D // 3
    sketch = np.asarray(apply(rng.standard_normal((dim, k))), dtype=float)
    q, _ = np.linalg.qr(sketch)
    low_rank = np.einsum("ij,ij->i", q, np.asarray(apply(q), dtype=float))
    g = rng.standard_normal((dim, k))
    ag = np.asarray(apply(g), dtype=float)
    resid = ag - q @ (q.T @ ag)
    return low_rank + np.sum(g * resid, axis=1) / np.sum(g * g, axis=1)


class LaplacePosterior(BaseEstimator):
    """Gaussian posterior ``N(z*, Gamma - V D V^T)`` built from eigenpairs.

    Parameters
    ----------
    rank : int, optional
        Pairs kept; all with eigenvalue at or above ``lambda_min`` when ``None``.

    Attributes
    ----------
    map_point_, prior_mean_ : ndarray of shape (m,)
    prior_cov_ : SpdOperator
    values_ : ndarray of shape (r,)
    vectors_ : ndarray of shape (m, r)
    d_r_ : ndarray of shape (r,)
        ``lambda / (1 + lambda)``.
    s_r_ : ndarray of shape (r,)
        ``1 - (1 + lambda)^{-1/2}``.
    """

    def __init__(self, rank=None):
        self.rank = rank

    def fit(self, problem, map_point, eigenpairs):
        return self.fit_components(map_point, problem.prior_mean_z, problem.prior_cov_z,
                                   eigenpairs)

    def fit_components(self, map_point, prior_mean, prior_cov, eigenpairs):
        r = eigenpairs.rank if self.rank is None else check_int(self.rank, "rank", 0)
        if r > eigenpairs.size:
            raise ValueError(f"rank {r} exceeds the {eigenpairs.size} available eigenpairs")
        self.map_point_ = check_vector(map_point, prior_cov.dim, "map_point")
        self.prior_mean_ = check_vector(prior_mean, prior_cov.dim, "prior_mean")
        self.prior_cov_ = prior_cov
        self.values_ = np.asarray(eigenpairs.values[:r], dtype=float)
        self.vectors_ = np.asarray(eigenpairs.vectors[:, :r], dtype=float)
        self.d_r_ = self.values_ / (1.0 + self.values_)
        self.s_r_ = 1.0 - 1.0 / np.sqrt(1.0 + self.values_)
        return self

    @property
    def rank_(self):
        return self.values_.shape[0]

    def _low_rank(self, coeff, x):
        v = self.vectors_
        if x.ndim == 1:
            return v @ (coeff * (v.T @ x))
        return v @ (coeff[:, None] * (v.T @ x))

    def apply_posterior_cov(self, x):
        """``(Gamma - V D V^T) x`` for a vector or a block of columns."""
        check_is_fitted(self, "d_r_")
        x = np.asarray(x, dtype=float)
        return self.prior_cov_.apply(x) - self._low_rank(self.d_r_, x)

    def posterior_cov_dense(self):
        return self.apply_posterior_cov(np.eye(self.prior_cov_.dim))

    def sample_prior(self, rng=None, size=None):
        """``mu + C xi`` with ``C C^T = Gamma``; ``size`` draws become columns."""
        check_is_fitted(self, "d_r_")
        rng = check_rng(rng)
        dim = self.prior_cov_.dim
        xi = rng.standard_normal(dim if size is None else (dim, size))
        shift = self.prior_mean_ if size is None else self.prior_mean_[:, None]
        return shift + self.prior_cov_.apply_sqrt(xi)

    def sample_posterior(self, z_prior):
        """Map a prior draw to a posterior draw.

        ``z_post = (I - V S V^T Gamma^{-1}) (z_prior - mu) + z*``; columns of a
        2-D input are treated as separate draws.
        """
        check_is_fitted(self, "d_r_")
        z_prior = np.asarray(z_prior, dtype=float)
        two_d = z_prior.ndim == 2
        mu = self.prior_mean_[:, None] if two_d else self.prior_mean_
        zs = self.map_point_[:, None] if two_d else self.map_point_
        dev = z_prior - mu
        return dev - self._low_rank(self.s_r_, self.prior_cov_.apply_inverse(dev)) + zs

    def variance_correction(self):
        """``sum_k lambda_k / (1 + lambda_k) v_k * v_k``."""
        check_is_fitted(self, "d_r_")
        return (self.vectors_ ** 2) @ self.d_r_

    def variances(self, s_D=300, rng=None, exact=False):
        """Prior and posterior pointwise variances.

        The prior diagonal is exact when ``exact`` is set and otherwise a
        Diag++ estimate with ``s_D`` products.  Negative posterior values
        are clamped to zero with a :class:`NegativeVarianceWarning`.
        """
        check_is_fitted(self, "d_r_")
        if exact:
            prior = self.prior_cov_.diagonal()
        else:
            prior = diag_pp(self.prior_cov_.apply, self.prior_cov_.dim, s_D, rng)
        post = prior - self.variance_correction()
        negative = int(np.count_nonzero(post < 0.0))
        if negative:
            warnings.warn(f"{negative} estimated variances were negative and set to 0",
                          NegativeVarianceWarning, stacklevel=2)
            post = np.maximum(post, 0.0)
        return prior, post

    def posterior_variance(self, s_D=300, rng=None, exact=False):
        return self.variances(s_D, rng, exact)[1]


def low_rank_error_bound(values, r):
    """Tail sum ``sum_{i > r} lambda_i / (1 + lambda_i)`` of discarded pairs."""
    tail = np.asarray(values, dtype=float)[r:]
    return float(np.sum(tail / (1.0 + tail)))


def dense_posterior_cov(prior_cov_matrix, misfit_hessian_matrix):
    """``(Gamma^{-1} + H_M)^{-1}`` by dense factorizations."""
    prec = np.linalg.inv(prior_cov_matrix) + misfit_hessian_matrix
    return sla.cho_solve(sla.cho_factor(0.5 * (prec + prec.T)), np.eye(prec.shape[0]))
