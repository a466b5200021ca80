"""Linear-Gaussian problem ``f(z, theta) = A z + B theta`` with dense oracles."""

import numpy as np
from scipy.stats import ortho_group

from .._validation import check_int, check_matrix, check_rng
from ..linops import DenseSpdOperator
from .base import BayesianInverseProblem


class LinearGaussianProblem(BayesianInverseProblem):
    """Linear forward map with every matrix kept for dense cross-checks.

    Covariances are passed as dense arrays; they are wrapped in
    :class:`~bayeshdsa.linops.DenseSpdOperator` for the matrix-free paths.
    """

    def __init__(self, A, B, data, noise_cov, prior_mean_z, prior_cov_z,
                 prior_mean_theta, prior_cov_theta, nominal_theta):
        self.A = check_matrix(A, name="A")
        self.B = check_matrix(B, shape=(self.A.shape[0], None), name="B")
        self.noise_cov_matrix = check_matrix(noise_cov, name="noise_cov")
        self.prior_cov_z_matrix = check_matrix(prior_cov_z, name="prior_cov_z")
        self.prior_cov_theta_matrix = check_matrix(prior_cov_theta, name="prior_cov_theta")
        super().__init__(
            data=data,
            noise_cov=DenseSpdOperator(self.noise_cov_matrix, name="NoiseCov"),
            prior_mean_z=prior_mean_z,
            prior_cov_z=DenseSpdOperator(self.prior_cov_z_matrix, name="PriorCovZ"),
            prior_mean_theta=prior_mean_theta,
            prior_cov_theta=DenseSpdOperator(self.prior_cov_theta_matrix, name="PriorCovTheta"),
            nominal_theta=nominal_theta,
        )
        if self.A.shape != (self.d_dim, self.m) or self.B.shape != (self.d_dim, self.n):
            raise ValueError("A and B must be (d_dim, m) and (d_dim, n)")

    def forward(self, z, theta=None):
        z, theta = self._point(z, theta)
        return self.A @ z + self.B @ theta

    def jac_z_vec(self, z, theta, x):
        return self.A @ x

    def jac_z_adjoint_vec(self, z, theta, y):
        return self.A.T @ y

    def jac_theta_vec(self, z, theta, e):
        return self.B @ e

    def second_zz(self, z, theta, y, x):
        return np.zeros(self.m)

    def second_ztheta(self, z, theta, y, e):
        return np.zeros(self.m)

    # dense quantities -------------------------------------------------
    def _noise_precision(self):
        return np.linalg.inv(self.noise_cov_matrix)

    def misfit_hessian_matrix(self):
        return self.A.T @ self._noise_precision() @ self.A

    def hessian_matrix(self):
        return self.misfit_hessian_matrix() + np.linalg.inv(self.prior_cov_z_matrix)

    def mixed_matrix(self):
        return self.A.T @ self._noise_precision() @ self.B

    def map_closed_form(self, theta=None):
        """MAP point from the normal equations."""
        theta = self.nominal_theta if theta is None else np.asarray(theta, dtype=float)
        prec_n = self._noise_precision()
        prec_z = np.linalg.inv(self.prior_cov_z_matrix)
        rhs = self.A.T @ prec_n @ (self.data - self.B @ theta) + prec_z @ self.prior_mean_z
        return np.linalg.solve(self.hessian_matrix(), rhs)

    def joint_precision(self):
        """Posterior precision of ``(z, theta)`` jointly."""
        prec_n = self._noise_precision()
        ab = np.hstack([self.A, self.B])
        prior = np.zeros((self.m + self.n, self.m + self.n))
        prior[: self.m, : self.m] = np.linalg.inv(self.prior_cov_z_matrix)
        prior[self.m:, self.m:] = np.linalg.inv(self.prior_cov_theta_matrix)
        return ab.T @ prec_n @ ab + prior

    def joint_covariance(self):
        return np.linalg.inv(self.joint_precision())


def _random_spd(rng, dim, low, high):
    if dim == 1:
        return np.array([[rng.uniform(low, high)]])
    q = ortho_group.rvs(dim, random_state=rng)
    return (q * rng.uniform(low, high, dim)) @ q.T


def _random_matrix(rng, rows, cols, low, high):
    """Random matrix with singular values drawn from ``[low, high]``."""
    k = min(rows, cols)
    u = ortho_group.rvs(rows, random_state=rng)[:, :k] if rows > 1 else np.ones((1, 1))
    v = ortho_group.rvs(cols, random_state=rng)[:, :k] if cols > 1 else np.ones((1, 1))
    return (u * rng.uniform(low, high, k)) @ v.T


def build_linear_model(m, n, d_dim, seed, noise_level=0.3, coupling=1.0):
    """Random well-conditioned linear-Gaussian problem.

    ``A`` and ``B`` have singular values in ``[0.5, 2]`` (``B`` scaled by
    ``coupling``; ``coupling=0`` decouples ``z`` from ``theta``).  Prior
    covariances have eigenvalues in ``[0.5, 2]`` and the noise covariance
    in ``noise_level**2 * [0.5, 2]``.  Data come from a prior draw of the
    truth plus noise; the nominal ``theta`` is the prior mean of ``theta``.
    """
    m, n, d_dim = (check_int(v, name, 1) for v, name in ((m, "m"), (n, "n"), (d_dim, "d_dim")))
    rng = check_rng(seed)
    A = _random_matrix(rng, d_dim, m, 0.5, 2.0)
    B = coupling * _random_matrix(rng, d_dim, n, 0.5, 2.0)
    cov_z = _random_spd(rng, m, 0.5, 2.0)
    cov_t = _random_spd(rng, n, 0.5, 2.0)
    cov_n = noise_level ** 2 * _random_spd(rng, d_dim, 0.5, 2.0)
    mu_z = rng.standard_normal(m)
    mu_t = rng.standard_normal(n)
    z_true = mu_z + np.linalg.cholesky(cov_z) @ rng.standard_normal(m)
    t_true = mu_t + np.linalg.cholesky(cov_t) @ rng.standard_normal(n)
    data = A @ z_true + B @ t_true + np.linalg.cholesky(cov_n) @ rng.standard_normal(d_dim)
    return LinearGaussianProblem(A, B, data, cov_n, mu_z, cov_z, mu_t, cov_t, nominal_theta=mu_t)
