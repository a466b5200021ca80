"""Post-optimality sensitivities of the MAP point to auxiliary parameters.

Differentiating the first-order condition ``grad_z J(z*(theta), theta) = 0``
gives the sensitivity operator ``-H^{-1} B`` with ``H`` the Hessian in
``z`` and ``B`` the mixed ``z``-``theta`` Hessian.  The indices reported here
measure its columns after projection onto the likelihood-informed subspace.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_vector
from .exceptions import NotAtStationaryPoint, NotLinearModel
from .io import write_csv
from .linops import cg_solve
from .map_solver import TrustRegionConfig, compute_map
from .models.linear import LinearGaussianProblem

SENSITIVITY_COLUMNS = ("index", "field", "x", "y", "S_i")


@dataclass(frozen=True)
class SensitivityReport:
    """Indices ``S_i`` with the auxiliary basis function each one belongs to.

    ``basis_meta[i]`` is ``(field, x, y)``: the field name and the location
    of the basis function's node.
    """

    indices: np.ndarray
    basis_meta: list
    rank_used: int
    nominal_theta: np.ndarray

    def field_indices(self, name):
        """Indices whose basis function belongs to field ``name``."""
        mask = np.array([meta[0] == name for meta in self.basis_meta])
        return self.indices[mask]

    def rows(self):
        return [(i, meta[0], float(meta[1]), float(meta[2]), float(s))
                for i, (meta, s) in enumerate(zip(self.basis_meta, self.indices))]

    def to_csv(self, path, header=None):
        write_csv(path, SENSITIVITY_COLUMNS, self.rows(), header)


def _check_stationary(problem, z, theta, grad_tol):
    g_norm = float(np.linalg.norm(problem.gradient_z(z, theta)))
    if g_norm > 10.0 * grad_tol:
        raise NotAtStationaryPoint(
            f"gradient norm {g_norm:.3e} exceeds 10 x {grad_tol:.1e}; not a MAP point")


def projected_sensitivities(values, vectors, mixed, weight):
    """``||P H^{-1} B e_i||_W`` from eigenpairs and the dense matrix ``B``.

    With ``V`` orthonormal in the prior precision and ``P = V V^T Gamma^{-1}``
    one has ``P H^{-1} = V diag(1 / (1 + lambda)) V^T``, so each index is
    ``sqrt(c_i^T (V^T W V) c_i)`` with ``c_i = diag(1/(1+lambda)) V^T B e_i``.
    """
    coeff = (vectors.T @ mixed) / (1.0 + values)[:, None]
    gram = vectors.T @ weight.apply(vectors) if vectors.shape[1] else np.zeros((0, 0))
    gram = 0.5 * (gram + gram.T)
    sq = np.einsum("ki,kj,ji->i", coeff, gram, coeff)
    return np.sqrt(np.maximum(sq, 0.0))


def sensitivity_indices(eig, problem, map_point, weight=None, r=None, theta=None,
                        grad_tol=1e-7, check_stationary=True, mixed=None):
    """LIS-projected sensitivity indices at a MAP point.

    Parameters
    ----------
    eig : EigenPairs
    problem : BayesianInverseProblem
    map_point : array of shape (m,)
    weight : WeightedNorm, optional
        Norm on the ``z`` space; ``problem.z_weight`` by default.
    r : int, optional
        Number of leading pairs to use; ``eig.rank`` by default.
    theta : array of shape (n,), optional
        Auxiliary value of the MAP solve; nominal by default.
    grad_tol : float
        Tolerance the MAP point was computed with.
    mixed : array of shape (m, n), optional
        Precomputed mixed Hessian ``B``.

    Raises
    ------
    NotAtStationaryPoint
        When ``||grad_z J|| > 10 * grad_tol`` at ``map_point``.
    """
    z = check_vector(map_point, problem.m, "map_point")
    theta = problem.nominal_theta if theta is None else check_vector(theta, problem.n, "theta")
    r = eig.rank if r is None else check_int(r, "r", 0)
    if r > eig.size:
        raise ValueError(f"r={r} exceeds the {eig.size} available eigenpairs")
    if check_stationary:
        _check_stationary(problem, z, theta, grad_tol)
    weight = problem.z_weight if weight is None else weight
    b = problem.mixed_hessian_matrix(z, theta) if mixed is None else np.asarray(mixed, float)
    s = projected_sensitivities(eig.values[:r], eig.vectors[:, :r], b, weight.weight)
    return SensitivityReport(s, problem.basis_meta(), r, theta.copy())


def sensitivity_operator_dense(problem, map_point, theta=None, gauss_newton=False,
                               rel_tol=1e-13):
    """Dense ``-H^{-1} B`` assembled column by column with CG."""
    z = check_vector(map_point, problem.m, "map_point")
    theta = problem.nominal_theta if theta is None else check_vector(theta, problem.n, "theta")
    hess = problem.hessian_operator(z, theta, gauss_newton)
    b = problem.mixed_hessian_matrix(z, theta)
    out = np.zeros((problem.m, problem.n))
    for i in range(problem.n):
        out[:, i] = -cg_solve(hess, b[:, i], rel_tol=rel_tol, max_iter=50 * problem.m)
    return out


class RegressionIdentityResult(NamedTuple):
    lhs: np.ndarray
    rhs: np.ndarray
    max_rel_err: float


def max_relative_error(a, b):
    """Largest entrywise ``|a - b| / |b|``; entries with ``a = b = 0`` count as exact."""
    diff = np.abs(a - b)
    scale = np.abs(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diff == 0.0, 0.0, diff / scale)
    return float(rel.max()) if rel.size else 0.0


def regression_identity_check(problem):
    """Compare ``-H^{-1} B`` with ``Gamma_{z theta} Gamma_{theta theta}^{-1}``.

    For a linear forward map the post-optimality sensitivity equals the
    regression coefficient of ``z`` on ``theta`` under the joint posterior;
    the right-hand side comes from dense inversion of the joint precision.

    Raises
    ------
    NotLinearModel
    """
    if not isinstance(problem, LinearGaussianProblem):
        raise NotLinearModel(f"{type(problem).__name__} is not a linear-Gaussian problem")
    m = problem.m
    z_map = problem.map_closed_form()
    lhs = sensitivity_operator_dense(problem, z_map)
    joint = problem.joint_covariance()
    cov_zt = joint[:m, m:]
    cov_tt = joint[m:, m:]
    rhs = np.linalg.solve(cov_tt, cov_zt.T).T
    return RegressionIdentityResult(lhs, rhs, max_relative_error(lhs, rhs))


SCAN_COLUMNS = ("scan", "theta1", "theta2", "z_map", "s_theta1", "s_theta2")


def scalar_sensitivity_scan(problem, theta1_grid=None, theta2_grid=None, cfg=None):
    """MAP points and unprojected sensitivities along two one-parameter scans.

    ``theta1`` is scanned with ``theta2`` at its nominal value and vice
    versa.  Each row is ``(scan, theta1, theta2, z_map, s_theta1, s_theta2)``
    with ``s_theta_i = |(-H^{-1} B e_i)|``; the problem must have ``m = 1``
    and ``n = 2``.
    """
    if problem.m != 1 or problem.n != 2:
        raise ValueError("the scan needs a problem with m = 1 and n = 2")
    theta1_grid = np.linspace(2.0, 8.0, 25) if theta1_grid is None else theta1_grid
    theta2_grid = np.linspace(0.4, 1.6, 25) if theta2_grid is None else theta2_grid
    cfg = TrustRegionConfig() if cfg is None else cfg
    nominal = problem.nominal_theta
    scans = [("theta1", np.array([t, nominal[1]])) for t in theta1_grid]
    scans += [("theta2", np.array([nominal[0], t])) for t in theta2_grid]
    rows = []
    z0 = problem.prior_mean_z
    for name, theta in scans:
        res = compute_map(problem, z0, cfg, theta)
        sens = np.abs(sensitivity_operator_dense(problem, res.map_point, theta)[0])
        rows.append((name, float(theta[0]), float(theta[1]), float(res.map_point[0]),
                     float(sens[0]), float(sens[1])))
    return rows


class HyperDifferentialSensitivity(BaseEstimator):
    """Estimator producing a :class:`SensitivityReport`.

    Parameters
    ----------
    rank : int, optional
        Eigenpairs used; all with eigenvalue at or above ``lambda_min`` when ``None``.
    grad_tol : float
        Tolerance the MAP point was computed with (checked at fit time).

    Attributes
    ----------
    report_ : SensitivityReport
    indices_ : ndarray of shape (n,)
    """

    def __init__(self, rank=None, grad_tol=1e-7):
        self.rank = rank
        self.grad_tol = grad_tol

    def fit(self, problem, map_point, eigenpairs, theta=None):
        self.report_ = sensitivity_indices(eigenpairs, problem, map_point, r=self.rank,
                                           theta=theta, grad_tol=self.grad_tol)
        self.indices_ = self.report_.indices
        return self

    def transform(self, X=None):
        check_is_fitted(self, "indices_")
        return self.indices_
