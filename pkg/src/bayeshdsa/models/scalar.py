"""Scalar exponential toy problem ``f(z, theta) = exp(z * theta_1 / 10) + theta_2``."""

import numpy as np

from .._validation import check_rng
from ..linops import diagonal_operator
from .base import BayesianInverseProblem

TRUE_Z = 5.0
TRUE_THETA = np.array([5.0, 1.0])
PRIOR_MEAN = np.array([5.0, 5.0, 1.0])
PRIOR_VAR = np.array([25.0, 4.0, 0.04])


class ScalarExpProblem(BayesianInverseProblem):
    """One inversion parameter, two auxiliary parameters, replicated data.

    Each of the ``d_dim`` observations is a noisy copy of the same scalar
    ``exp(z theta_1 / 10) + theta_2``.
    """

    def _scalar(self, z, theta):
        ez = np.exp(z[0] * theta[0] / 10.0)
        return ez, np.ones(self.d_dim)

    def forward(self, z, theta=None):
        z, theta = self._point(z, theta)
        ez, ones = self._scalar(z, theta)
        return (ez + theta[1]) * ones

    def jac_z_vec(self, z, theta, x):
        ez, ones = self._scalar(z, theta)
        return (theta[0] / 10.0 * ez * x[0]) * ones

    def jac_z_adjoint_vec(self, z, theta, y):
        ez, _ = self._scalar(z, theta)
        return np.array([theta[0] / 10.0 * ez * np.sum(y)])

    def jac_theta_vec(self, z, theta, e):
        ez, ones = self._scalar(z, theta)
        return (z[0] / 10.0 * ez * e[0] + e[1]) * ones

    def second_zz(self, z, theta, y, x):
        ez, _ = self._scalar(z, theta)
        return np.array([(theta[0] / 10.0) ** 2 * ez * x[0] * np.sum(y)])

    def second_ztheta(self, z, theta, y, e):
        ez, _ = self._scalar(z, theta)
        d_theta1 = ez / 10.0 * (1.0 + z[0] * theta[0] / 10.0)
        return np.array([d_theta1 * e[0] * np.sum(y)])


def build_scalar_exp_model(seed, noise_std=1.0, n_data=3, nominal_theta=None):
    """Toy problem with prior ``N((5, 5, 1), diag(5^2, 2^2, 0.2^2))``.

    Data are ``n_data`` replicates of ``f(5, 5, 1)`` with i.i.d. Gaussian
    noise of standard deviation ``noise_std``.
    """
    rng = check_rng(seed)
    clean = np.exp(TRUE_Z * TRUE_THETA[0] / 10.0) + TRUE_THETA[1]
    data = clean + noise_std * rng.standard_normal(n_data)
    var = PRIOR_VAR
    return ScalarExpProblem(
        data=data,
        noise_cov=diagonal_operator(np.full(n_data, noise_std ** 2)),
        prior_mean_z=PRIOR_MEAN[:1],
        prior_cov_z=diagonal_operator(var[:1]),
        prior_mean_theta=PRIOR_MEAN[1:],
        prior_cov_theta=diagonal_operator(var[1:]),
        nominal_theta=TRUE_THETA.copy() if nominal_theta is None else nominal_theta,
    )
