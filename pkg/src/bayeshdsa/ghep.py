"""Randomized solver for the pencil ``(H_M, Gamma^{-1})`` and the subspace it spans.

The leading generalized eigenvectors of the misfit Hessian ``H_M`` with
respect to the prior precision ``Gamma^{-1}`` span the likelihood-informed
subspace.  :func:`solve_ghep` finds them with a two-pass randomized method
that widens its sketch until the smallest computed eigenvalue falls below a
threshold.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_positive, check_rng
from .exceptions import RankExhausted
from .io import read_eigenpairs, write_eigenpairs

ZERO_CLAMP = 1e-12


@dataclass(frozen=True)
class GhepConfig:
    """Sketch sizes and stopping threshold of :func:`solve_ghep`.

    The first pass uses ``max(r0 - delta_r + oversampling, 1)`` random
    columns; each further pass adds ``delta_r``.
    """

    r0: int = 20
    delta_r: int = 10
    oversampling: int = 20
    lambda_min: float = 0.1
    seed: int = 0

    def __post_init__(self):
        check_int(self.r0, "r0", 1)
        check_int(self.delta_r, "delta_r", 1)
        check_int(self.oversampling, "oversampling", 0)
        check_positive(self.lambda_min, "lambda_min")

    @property
    def initial_width(self):
        return max(self.r0 - self.delta_r + self.oversampling, 1)


@dataclass(frozen=True)
class EigenPairs:
    """Generalized eigenpairs sorted by decreasing eigenvalue.

    ``vectors`` has one column per eigenvalue and is orthonormal in the
    ``Gamma^{-1}`` inner product.  ``rank`` counts eigenvalues at or above
    ``lambda_min``; every computed pair is kept.  ``pass_minima`` holds the
    smallest Ritz value of each sketch pass.
    """

    values: np.ndarray
    vectors: np.ndarray
    lambda_min: float = 0.0
    rank_exhausted: bool = False
    n_passes: int = 1
    pass_minima: tuple = ()

    @property
    def rank(self):
        return int(np.count_nonzero(self.values >= self.lambda_min))

    @property
    def size(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[0]

    def truncate(self, r):
        """Leading ``r`` pairs."""
        r = check_int(r, "r", 0)
        if r > self.size:
            raise ValueError(f"cannot keep {r} of {self.size} eigenpairs")
        return EigenPairs(self.values[:r].copy(), self.vectors[:, :r].copy(), self.lambda_min,
                          self.rank_exhausted, self.n_passes, self.pass_minima)

    def save(self, path, header=None):
        write_eigenpairs(path, self.values, self.vectors, header)

    @classmethod
    def load(cls, path, lambda_min=0.0):
        values, vectors = read_eigenpairs(path)
        return cls(values, vectors, lambda_min)


def _orthonormalize_into(q, q_prec, y, prior_cov, rng, rtol=1e-10):
    """Append ``Gamma^{-1}``-orthonormalized columns of ``y`` to ``(q, q_prec)``.

    Classical Gram-Schmidt with one reorthogonalization.  Columns that
    vanish after projection are replaced by fresh Gaussian vectors so the
    basis always grows by ``y.shape[1]``.
    """
    dim, k0 = q.shape
    k_new = y.shape[1]
    basis = np.hstack([q, np.zeros((dim, k_new))])
    basis_prec = np.hstack([q_prec, np.zeros((dim, k_new))])
    k = k0
    for j in range(k_new):
        v = y[:, j].copy()
        for _ in range(8):
            v_prec = prior_cov.apply_inverse(v)
            start = np.sqrt(max(v @ v_prec, 0.0))
            if start > 0.0:
                for _ in range(2):
                    v = v - basis[:, :k] @ (basis_prec[:, :k].T @ v)
                v_prec = prior_cov.apply_inverse(v)
                nrm = np.sqrt(max(v @ v_prec, 0.0))
                if nrm > rtol * start:
                    basis[:, k] = v / nrm
                    basis_prec[:, k] = v_prec / nrm
                    k += 1
                    break
            v = rng.standard_normal(dim)
        else:
            raise RuntimeError("could not extend the basis; is the dimension exhausted?")
    return basis, basis_prec


def solve_ghep(misfit_hess, prior_cov, cfg=None):
    """Generalized eigenpairs of ``H_M v = lambda Gamma^{-1} v``.

    Parameters
    ----------
    misfit_hess : SymmetricOperator
        Positive semidefinite misfit Hessian.
    prior_cov : SpdOperator
        Prior covariance ``Gamma``; needs ``apply_inverse``.
    cfg : GhepConfig, optional

    Returns
    -------
    EigenPairs
        All Ritz pairs of the final sketch.  Eigenvalues below ``1e-12`` are
        set to zero.  When the sketch reaches the full dimension before the
        smallest eigenvalue drops below ``cfg.lambda_min`` a
        :class:`RankExhausted` warning is issued and ``rank_exhausted`` set.
    """
    cfg = GhepConfig() if cfg is None else cfg
    dim = misfit_hess.dim
    if prior_cov.dim != dim:
        raise ValueError("operator dimensions differ")
    rng = check_rng(cfg.seed)
    q = np.zeros((dim, 0))
    q_prec = np.zeros((dim, 0))
    hq = np.zeros((dim, 0))
    width = min(cfg.initial_width, dim)
    minima = []
    exhausted = False
    while True:
        omega = rng.standard_normal((dim, width))
        y = prior_cov.apply(misfit_hess.apply(omega))
        q, q_prec = _orthonormalize_into(q, q_prec, y, prior_cov, rng)
        hq = np.hstack([hq, misfit_hess.apply(q[:, hq.shape[1]:])])
        t = q.T @ hq
        t = 0.5 * (t + t.T)
        lam, s = sla.eigh(t)
        order = np.argsort(lam)[::-1]
        lam, s = lam[order], s[:, order]
        lam[lam < ZERO_CLAMP] = 0.0
        minima.append(float(lam[-1]))
        if lam[-1] < cfg.lambda_min:
            break
        if q.shape[1] >= dim:
            exhausted = True
            warnings.warn(f"eigenvalues stay above {cfg.lambda_min} up to the full dimension "
                          f"{dim}", RankExhausted, stacklevel=2)
            break
        width = min(cfg.delta_r, dim - q.shape[1])
    return EigenPairs(lam, q @ s, cfg.lambda_min, exhausted, len(minima), tuple(minima))


class LikelihoodInformedSubspace(TransformerMixin, BaseEstimator):
    """Estimator computing the likelihood-informed subspace at a MAP point.

    ``transform`` maps rows of ``X`` (parameter vectors) to subspace
    coordinates ``V^T Gamma^{-1} x``; ``inverse_transform`` maps coordinates
    back to ``V c``.

    Attributes
    ----------
    eigenpairs_ : EigenPairs
    n_components_ : int
        Number of eigenvalues at or above ``lambda_min``.
    """

    def __init__(self, r0=20, delta_r=10, oversampling=20, lambda_min=0.1, random_state=0,
                 gauss_newton=None):
        self.r0 = r0
        self.delta_r = delta_r
        self.oversampling = oversampling
        self.lambda_min = lambda_min
        self.random_state = random_state
        self.gauss_newton = gauss_newton

    def config(self):
        return GhepConfig(self.r0, self.delta_r, self.oversampling, self.lambda_min,
                          self.random_state)

    def fit(self, problem, map_point=None, theta=None):
        """Solve the eigenproblem at ``map_point`` (the prior mean if omitted)."""
        z = problem.prior_mean_z if map_point is None else map_point
        hess = problem.misfit_hessian_operator(z, theta, self.gauss_newton)
        return self.fit_operators(hess, problem.prior_cov_z)

    def fit_operators(self, misfit_hess, prior_cov):
        self.prior_cov_ = prior_cov
        self.eigenpairs_ = solve_ghep(misfit_hess, prior_cov, self.config())
        self.n_components_ = self.eigenpairs_.rank
        return self

    def transform(self, X):
        check_is_fitted(self, "eigenpairs_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        v = self.eigenpairs_.vectors[:, : self.n_components_]
        return (self.prior_cov_.apply_inverse(X.T).T) @ v

    def inverse_transform(self, X):
        check_is_fitted(self, "eigenpairs_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.eigenpairs_.vectors[:, : self.n_components_].T
