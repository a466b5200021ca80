"""Common interface for Gaussian-prior, Gaussian-noise inverse problems.

Subclasses supply the forward map and its first and second derivative
actions; this base class turns them into the misfit, regularization,
gradient and Hessian products that the solvers consume.  Every point
argument ``theta`` defaults to the problem's nominal auxiliary value.
"""

import numpy as np

from .._validation import check_vector
from ..linops import SpdOperator, SymmetricOperator, WeightedNorm, identity_operator


class BayesianInverseProblem:
    """Forward model bundled with priors, noise model and nominal parameters.

    Parameters
    ----------
    data : array of shape (d_dim,)
        Observations ``d``.
    noise_cov : SpdOperator
        Noise covariance; must provide ``apply_inverse``.
    prior_mean_z, prior_cov_z
        Gaussian prior on the inversion parameters ``z``.
    prior_mean_theta, prior_cov_theta
        Gaussian prior on the auxiliary parameters ``theta``.
    nominal_theta : array of shape (n,)
        Value at which ``theta`` is frozen when solving for ``z``.
    z_weight : WeightedNorm, optional
        Inner product on the ``z`` space; the Euclidean one by default.
    """

    #: Whether Hessian products drop second derivatives of the forward map by default.
    gauss_newton_default = False

    def __init__(self, data, noise_cov, prior_mean_z, prior_cov_z,
                 prior_mean_theta, prior_cov_theta, nominal_theta, z_weight=None):
        self.data = check_vector(data, name="data")
        self.d_dim = self.data.shape[0]
        self.prior_mean_z = check_vector(prior_mean_z, name="prior_mean_z")
        self.m = self.prior_mean_z.shape[0]
        self.prior_mean_theta = check_vector(prior_mean_theta, name="prior_mean_theta")
        self.n = self.prior_mean_theta.shape[0]
        self.nominal_theta = check_vector(nominal_theta, self.n, "nominal_theta")
        for op, dim, label in ((noise_cov, self.d_dim, "noise_cov"),
                               (prior_cov_z, self.m, "prior_cov_z"),
                               (prior_cov_theta, self.n, "prior_cov_theta")):
            if not isinstance(op, SpdOperator) or op.dim != dim:
                raise ValueError(f"{label} must be an SpdOperator of dimension {dim}")
        self.noise_cov = noise_cov
        self.prior_cov_z = prior_cov_z
        self.prior_cov_theta = prior_cov_theta
        self.z_weight = z_weight if z_weight is not None else WeightedNorm(identity_operator(self.m))

    # ------------------------------------------------------------------
    # hooks implemented by concrete models
    def forward(self, z, theta=None):
        raise NotImplementedError

    def jac_z_vec(self, z, theta, x):
        """Jacobian of the forward map in ``z`` applied to ``x``."""
        raise NotImplementedError

    def jac_z_adjoint_vec(self, z, theta, y):
        """Transposed ``z``-Jacobian applied to a data-space vector ``y``."""
        raise NotImplementedError

    def jac_theta_vec(self, z, theta, e):
        raise NotImplementedError

    def second_zz(self, z, theta, y, x):
        """``sum_i y_i (d^2 f_i / dz dz) x``."""
        raise NotImplementedError

    def second_ztheta(self, z, theta, y, e):
        """``sum_i y_i (d^2 f_i / dz dtheta) e``."""
        raise NotImplementedError

    # ------------------------------------------------------------------
    def _point(self, z, theta):
        z = check_vector(z, self.m, "z")
        theta = self.nominal_theta if theta is None else check_vector(theta, self.n, "theta")
        return z, theta

    def _use_gn(self, gauss_newton):
        return self.gauss_newton_default if gauss_newton is None else bool(gauss_newton)

    def weighted_residual(self, z, theta=None):
        """``noise_cov^{-1} (f(z, theta) - d)``."""
        z, theta = self._point(z, theta)
        return self.noise_cov.apply_inverse(self.forward(z, theta) - self.data)

    def misfit(self, z, theta=None):
        z, theta = self._point(z, theta)
        r = self.forward(z, theta) - self.data
        return 0.5 * float(r @ self.noise_cov.apply_inverse(r))

    def regularization(self, z):
        z = check_vector(z, self.m, "z")
        dz = z - self.prior_mean_z
        return 0.5 * float(dz @ self.prior_cov_z.apply_inverse(dz))

    def objective(self, z, theta=None):
        """Negative log conditional posterior ``misfit + regularization``."""
        return self.misfit(z, theta) + self.regularization(z)

    def gradient_z(self, z, theta=None):
        z, theta = self._point(z, theta)
        w = self.weighted_residual(z, theta)
        return self.jac_z_adjoint_vec(z, theta, w) + self.prior_cov_z.apply_inverse(
            z - self.prior_mean_z)

    def misfit_hessian_vec(self, z, theta, x, gauss_newton=None):
        """Misfit Hessian ``d^2 M / dz dz`` applied to ``x``."""
        z, theta = self._point(z, theta)
        x = check_vector(x, self.m, "x")
        jx = self.jac_z_vec(z, theta, x)
        out = self.jac_z_adjoint_vec(z, theta, self.noise_cov.apply_inverse(jx))
        if not self._use_gn(gauss_newton):
            out = out + self.second_zz(z, theta, self.weighted_residual(z, theta), x)
        return out

    def hessian_vec(self, z, theta, x, gauss_newton=None):
        """Full Hessian ``d^2 J / dz dz`` applied to ``x``."""
        x = check_vector(x, self.m, "x")
        return (self.misfit_hessian_vec(z, theta, x, gauss_newton)
                + self.prior_cov_z.apply_inverse(x))

    def mixed_hessian_vec(self, z, theta, e, gauss_newton=False):
        """``d^2 J / dz dtheta`` applied to an auxiliary direction ``e``."""
        z, theta = self._point(z, theta)
        e = check_vector(e, self.n, "e")
        je = self.jac_theta_vec(z, theta, e)
        out = self.jac_z_adjoint_vec(z, theta, self.noise_cov.apply_inverse(je))
        if not gauss_newton:
            out = out + self.second_ztheta(z, theta, self.weighted_residual(z, theta), e)
        return out

    def mixed_hessian_matrix(self, z, theta=None, gauss_newton=False):
        """Dense ``m x n`` matrix whose columns are ``B e_i``."""
        z, theta = self._point(z, theta)
        eye = np.eye(self.n)
        return np.column_stack(
            [self.mixed_hessian_vec(z, theta, eye[:, i], gauss_newton) for i in range(self.n)])

    def misfit_hessian_operator(self, z, theta=None, gauss_newton=None):
        z, theta = self._point(z, theta)
        return SymmetricOperator(
            self.m, lambda x: self.misfit_hessian_vec(z, theta, x, gauss_newton),
            name="MisfitHessian")

    def hessian_operator(self, z, theta=None, gauss_newton=None):
        z, theta = self._point(z, theta)
        return SpdOperator(
            self.m, lambda x: self.hessian_vec(z, theta, x, gauss_newton), name="Hessian")

    # ------------------------------------------------------------------
    def basis_meta(self):
        """One descriptor per auxiliary coordinate: ``(field, x, y)``."""
        return [("theta", float(i), 0.0) for i in range(self.n)]

    @property
    def z_grid_shape(self):
        """Shape used when writing ``z``-space vectors as grids."""
        return (1, self.m)
