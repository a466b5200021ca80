"""Matrix-free symmetric operators and the Krylov kernels built on them.

Everything downstream (priors, noise models, Hessians, mass matrices) is
wrapped in a :class:`SymmetricOperator` or :class:`SpdOperator`, so the
solvers only ever see ``dim`` and ``apply``.  Operators are immutable and
never hold random state.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_int, check_matrix, check_vector
from .exceptions import (
    BreakdownError,
    DimensionMismatch,
    MaxIterExceeded,
    NonPositiveCurvature,
)

__all__ = [
    "SymmetricOperator",
    "SpdOperator",
    "DenseSpdOperator",
    "SparseSpdOperator",
    "WeightedNorm",
    "identity_operator",
    "diagonal_operator",
    "cg_solve",
    "lanczos_tridiag",
    "lanczos_sqrt_apply",
    "weighted_norm",
    "mass_matrix_1d",
    "mass_matrix_2d",
]


class SymmetricOperator:
    """A symmetric linear map on R^dim given only through its action.

    Parameters
    ----------
    dim : int
        Size of the vectors the operator acts on.
    apply : callable
        ``apply(x)`` returns the product with ``x``.
    blockwise : bool, default=False
        Whether ``apply`` already accepts ``(dim, k)`` arrays.  When false,
        block inputs are applied column by column.
    name : str, optional
        Label used in ``repr``.
    """

    def __init__(self, dim, apply, blockwise=False, name=None):
        self.dim = check_int(dim, "dim", minimum=1)
        self._apply = apply
        self._blockwise = blockwise
        self.name = name or type(self).__name__

    def __repr__(self):
        return f"<{self.name} dim={self.dim}>"

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[0] != self.dim:
            raise DimensionMismatch(
                f"{self.name} acts on length-{self.dim} vectors, got shape {x.shape}"
            )
        return x

    def _columnwise(self, fn, x):
        if x.ndim == 1 or self._blockwise:
            return np.asarray(fn(x), dtype=np.float64)
        out = np.empty_like(x)
        for j in range(x.shape[1]):
            out[:, j] = fn(x[:, j])
        return out

    def apply(self, x):
        """Return the operator applied to ``x`` (a vector or a block of columns)."""
        return self._columnwise(self._apply, self._check_input(x))

    def __matmul__(self, x):
        return self.apply(x)

    def to_dense(self):
        """Assemble the operator by applying it to the identity."""
        return self.apply(np.eye(self.dim))


class SpdOperator(SymmetricOperator):
    """Symmetric positive definite operator with optional inverse and factor.

    ``apply_sqrt`` applies any factor ``C`` with ``C @ C.T`` equal to the
    operator; it is what Gaussian samplers need and need not be the
    symmetric square root.
    """

    def __init__(self, dim, apply, apply_inverse=None, apply_sqrt=None,
                 diagonal=None, blockwise=False, name=None):
        super().__init__(dim, apply, blockwise=blockwise, name=name)
        self._apply_inverse = apply_inverse
        self._apply_sqrt = apply_sqrt
        self._diagonal = diagonal

    @property
    def has_inverse(self):
        return self._apply_inverse is not None

    @property
    def has_sqrt(self):
        return self._apply_sqrt is not None

    def apply_inverse(self, x):
        if self._apply_inverse is None:
            raise NotImplementedError(f"{self.name} has no inverse action")
        return self._columnwise(self._apply_inverse, self._check_input(x))

    def apply_sqrt(self, x):
        if self._apply_sqrt is None:
            raise NotImplementedError(f"{self.name} has no square-root factor")
        return self._columnwise(self._apply_sqrt, self._check_input(x))

    def diagonal(self):
        """Exact diagonal; falls back to ``dim`` applications when not supplied."""
        if self._diagonal is not None:
            d = self._diagonal() if callable(self._diagonal) else self._diagonal
            return np.array(d, dtype=np.float64)
        return np.diag(self.to_dense()).copy()


class DenseSpdOperator(SpdOperator):
    """SPD operator backed by an explicit matrix and its Cholesky factor."""

    def __init__(self, matrix, name=None):
        a = check_matrix(matrix, name="matrix")
        if a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"matrix must be square, got {a.shape}")
        if not np.allclose(a, a.T, rtol=1e-12, atol=1e-14 * np.abs(a).max()):
            raise ValueError("matrix is not symmetric")
        a = 0.5 * (a + a.T)
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise ValueError("matrix is not positive definite") from exc
        self.matrix = a
        self.cholesky = chol
        super().__init__(
            a.shape[0],
            apply=lambda x: a @ x,
            apply_inverse=lambda x: sla.cho_solve((chol, True), x),
            apply_sqrt=lambda x: chol @ x,
            diagonal=np.diag(a).copy(),
            blockwise=True,
            name=name or "DenseSpdOperator",
        )

    def to_dense(self):
        return self.matrix.copy()


class SparseSpdOperator(SpdOperator):
    """SPD operator backed by a sparse matrix and a sparse LU for inverses."""

    def __init__(self, matrix, name=None):
        a = sp.csc_matrix(matrix, dtype=np.float64)
        if a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"matrix must be square, got {a.shape}")
        lu = spla.splu(a)
        self.matrix = a
        super().__init__(
            a.shape[0],
            apply=lambda x: a @ x,
            apply_inverse=lu.solve,
            diagonal=a.diagonal().copy(),
            blockwise=True,
            name=name or "SparseSpdOperator",
        )


def identity_operator(dim):
    return SpdOperator(
        dim,
        apply=lambda x: np.array(x, dtype=np.float64),
        apply_inverse=lambda x: np.array(x, dtype=np.float64),
        apply_sqrt=lambda x: np.array(x, dtype=np.float64),
        diagonal=np.ones(dim),
        blockwise=True,
        name="Identity",
    )


def diagonal_operator(d):
    """SPD operator ``diag(d)``; every entry of ``d`` must be positive."""
    d = check_vector(d, name="d")
    if np.any(d <= 0):
        raise ValueError("diagonal entries must be positive")
    col = d[:, None]
    root = np.sqrt(col)

    def scale(v, s):
        return v * (s if v.ndim == 2 else s[:, 0])

    return SpdOperator(
        d.shape[0],
        apply=lambda x: scale(x, col),
        apply_inverse=lambda x: scale(x, 1.0 / col),
        apply_sqrt=lambda x: scale(x, root),
        diagonal=d.copy(),
        blockwise=True,
        name="Diagonal",
    )


@dataclass(frozen=True)
class WeightedNorm:
    """The norm ``sqrt(x^T W x)`` for an SPD weight ``W``."""

    weight: SpdOperator

    def inner(self, x, y):
        x = check_vector(x, self.weight.dim, "x")
        y = check_vector(y, self.weight.dim, "y")
        return float(x @ self.weight.apply(y))

    def norm(self, x):
        x = check_vector(x, self.weight.dim, "x")
        return float(np.sqrt(max(x @ self.weight.apply(x), 0.0)))

    __call__ = norm


def weighted_norm(w, x):
    """Return ``sqrt(x^T W x)`` for the weight carried by ``w``."""
    return w.norm(x)


def cg_solve(op, rhs, rel_tol=1e-10, max_iter=None, x0=None):
    """Solve ``op x = rhs`` by unpreconditioned conjugate gradients.

    Convergence is declared on the true residual ``rhs - op(x)``, recomputed
    whenever the recursive residual says we are done, so the returned ``x``
    always satisfies ``||op(x) - rhs|| <= rel_tol * ||rhs||``.

    Raises
    ------
    NonPositiveCurvature
        If a search direction has ``p^T op(p) <= 0``.
    MaxIterExceeded
        If ``max_iter`` iterations (default ``10 * dim``) do not suffice.
    """
    b = check_vector(rhs, op.dim, "rhs")
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    max_iter = 10 * op.dim if max_iter is None else check_int(max_iter, "max_iter", 1)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    target = rel_tol * bnorm

    x = np.zeros_like(b) if x0 is None else check_vector(x0, op.dim, "x0").copy()
    r = b - op.apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(max_iter):
        if np.sqrt(rr) <= target:
            r = b - op.apply(x)
            rr = r @ r
            if np.sqrt(rr) <= target:
                return x
            p = r.copy()
        ap = op.apply(p)
        pap = p @ ap
        if pap <= 0.0:
            raise NonPositiveCurvature(f"p^T A p = {pap:.3e} <= 0")
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    r = b - op.apply(x)
    if np.linalg.norm(r) <= target:
        return x
    raise MaxIterExceeded(
        f"CG stopped after {max_iter} iterations at relative residual "
        f"{np.linalg.norm(r) / bnorm:.3e} (target {rel_tol:.1e})"
    )


class LanczosInfo(NamedTuple):
    steps: int
    breakdown: bool


def lanczos_tridiag(op, x, k, breakdown_tol=1e-10):
    """Run ``k`` Lanczos steps from ``x`` with full reorthogonalization.

    Returns the orthonormal basis ``Q`` (dim x steps), the diagonal and
    off-diagonal of the tridiagonal matrix, and ``x``'s norm.  Fewer than
    ``k`` columns come back when the Krylov space becomes invariant.
    """
    x = check_vector(x, op.dim, "x")
    k = check_int(k, "k", minimum=1)
    if k > op.dim:
        raise ValueError(f"k={k} exceeds operator dimension {op.dim}")
    beta0 = np.linalg.norm(x)
    q_basis = np.zeros((op.dim, k))
    alphas = np.zeros(k)
    betas = np.zeros(max(k - 1, 0))
    if beta0 == 0.0:
        return q_basis[:, :0], alphas[:0], betas[:0], 0.0
    q = x / beta0
    scale = 0.0
    steps = 0
    for j in range(k):
        q_basis[:, j] = q
        w = op.apply(q)
        alphas[j] = q @ w
        steps = j + 1
        basis = q_basis[:, :steps]
        # two passes of classical Gram-Schmidt against the whole basis
        for _ in range(2):
            w -= basis @ (basis.T @ w)
        beta = np.linalg.norm(w)
        scale = max(scale, abs(alphas[j]) + beta + (betas[j - 1] if j else 0.0))
        if steps == k:
            break
        if beta <= breakdown_tol * scale:
            break
        betas[j] = beta
        q = w / beta
    return q_basis[:, :steps], alphas[:steps], betas[: steps - 1], beta0


def lanczos_sqrt_apply(op, x, k, return_info=False, on_breakdown="flag"):
    """Approximate ``op^{1/2} x`` from a ``k``-step Lanczos decomposition.

    With ``Q_k`` and tridiagonal ``T_k`` from Lanczos started at ``x``, the
    approximation is ``||x|| Q_k T_k^{1/2} e_1``; it is exact up to rounding
    once the Krylov space is invariant, in particular when ``k == dim``.

    Parameters
    ----------
    op : SymmetricOperator
        SPD operator.
    x : array of shape (dim,)
    k : int
        Number of Lanczos steps, ``1 <= k <= dim``.
    return_info : bool, default=False
        Also return a :class:`LanczosInfo` with the steps taken and whether
        an early breakdown occurred.
    on_breakdown : {"flag", "raise"}
        An early breakdown means ``x`` lies in a small invariant subspace and
        the current approximation is already exact.  ``"flag"`` returns it
        and records the event in the info; ``"raise"`` raises
        :class:`BreakdownError` carrying the approximation as ``.result``.
    """
    if on_breakdown not in ("flag", "raise"):
        raise ValueError("on_breakdown must be 'flag' or 'raise'")
    q_basis, alphas, betas, beta0 = lanczos_tridiag(op, x, k)
    steps = q_basis.shape[1]
    if steps == 0:
        y = np.zeros(op.dim)
        info = LanczosInfo(0, False)
        return (y, info) if return_info else y
    theta, u = sla.eigh_tridiagonal(alphas, betas)
    if theta.min() < -1e-10 * max(abs(theta).max(), 1e-300):
        raise NonPositiveCurvature(f"Lanczos Ritz value {theta.min():.3e} < 0")
    coeffs = u @ (np.sqrt(np.clip(theta, 0.0, None)) * u[0, :])
    y = beta0 * (q_basis @ coeffs)
    info = LanczosInfo(steps, steps < k)
    if info.breakdown and on_breakdown == "raise":
        err = BreakdownError(f"Lanczos broke down after {steps} of {k} steps")
        err.result = y
        raise err
    return (y, info) if return_info else y


def mass_matrix_1d(n_nodes, length):
    """Consistent P1 finite-element mass matrix on a uniform 1-D mesh."""
    n_nodes = check_int(n_nodes, "n_nodes", minimum=2)
    h = length / (n_nodes - 1)
    main = np.full(n_nodes, 4.0)
    main[[0, -1]] = 2.0
    off = np.ones(n_nodes - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csc") * (h / 6.0)


def mass_matrix_2d(nx, ny, lx, ly):
    """Bilinear (Q1) mass matrix on an ``nx`` by ``ny`` grid, row-major in x."""
    return sp.kron(mass_matrix_1d(ny, ly), mass_matrix_1d(nx, lx), format="csc")
