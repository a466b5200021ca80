"""MAP estimation by a truncated Newton-CG trust-region method."""

import math
import warnings
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_positive, check_vector
from .exceptions import ForwardSolveFailure, MaxOuterExceeded
from .io import write_csv

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class TrustRegionConfig:
    """Settings of :func:`compute_map`.

    ``initial_radius=None`` picks the Cauchy step length of the first
    iterate.  The CG tolerance at iterate ``k`` is
    ``min(cg_rel_tol, sqrt(||g_k||))``.  ``gauss_newton=None`` uses the
    problem's default Hessian.
    """

    grad_tol: float = 1e-7
    max_outer: int = 200
    initial_radius: float = None
    max_radius: float = 1e10
    eta_accept: float = 0.05
    cg_rel_tol: float = 0.5
    cg_max_iter: int = None
    gauss_newton: bool = None

    def __post_init__(self):
        check_positive(self.grad_tol, "grad_tol")
        check_int(self.max_outer, "max_outer", 1)
        if self.initial_radius is not None:
            check_positive(self.initial_radius, "initial_radius")
        check_positive(self.max_radius, "max_radius")
        if not 0.0 < self.eta_accept < 0.25:
            raise ValueError("eta_accept must lie in (0, 0.25)")
        if not 0.0 < self.cg_rel_tol < 1.0:
            raise ValueError("cg_rel_tol must lie in (0, 1)")
        if self.cg_max_iter is not None:
            check_int(self.cg_max_iter, "cg_max_iter", 1)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    grad_norm: float
    step_size: float
    cg_iters: int
    radius: float
    accepted: bool


HISTORY_COLUMNS = tuple(f.name for f in fields(IterationRecord))


@dataclass(frozen=True)
class SteihaugResult:
    """Trust-region subproblem solution; unpacks as ``(step, status)``."""

    step: np.ndarray
    status: str
    iterations: int
    predicted_reduction: float

    def __iter__(self):
        return iter((self.step, self.status))


class MapResult(NamedTuple):
    map_point: np.ndarray
    history: list
    converged: bool


def _boundary_tau(p, d, radius):
    a = d @ d
    b = 2.0 * (p @ d)
    c = p @ p - radius * radius
    return (-b + math.sqrt(max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a)


def steihaug_cg(grad, hess_apply, radius, rel_tol=0.5, max_iter=None):
    """Approximately minimize ``g.p + p.H p / 2`` subject to ``||p|| <= radius``.

    Parameters
    ----------
    grad : array of shape (m,)
    hess_apply : callable or operator
        Hessian product; anything accepting ``hess_apply(x)`` or ``hess_apply @ x``.
    radius : float
    rel_tol : float
        CG stops once the model gradient has shrunk by this factor.
    max_iter : int, optional
        Defaults to ``2 * m``.

    Returns
    -------
    SteihaugResult
        ``status`` is ``"interior"``, ``"boundary"`` or ``"negative_curvature"``.
    """
    g = check_vector(grad, name="grad")
    check_positive(radius, "radius")
    apply = hess_apply if callable(hess_apply) else (lambda x: hess_apply @ x)
    max_iter = 2 * g.shape[0] if max_iter is None else max_iter
    p = np.zeros_like(g)
    r = g.copy()
    g_norm = math.sqrt(g @ g)
    if g_norm == 0.0:
        return SteihaugResult(p, "interior", 0, 0.0)
    d = -r
    rr = g_norm * g_norm
    tol = rel_tol * g_norm
    status = "interior"
    it = 0
    while it < max_iter:
        it += 1
        hd = np.asarray(apply(d), dtype=float)
        curv = d @ hd
        if curv <= 0.0:
            tau = _boundary_tau(p, d, radius)
            p, r = p + tau * d, r + tau * hd
            status = "negative_curvature"
            break
        alpha = rr / curv
        p_next = p + alpha * d
        if math.sqrt(p_next @ p_next) >= radius:
            tau = _boundary_tau(p, d, radius)
            p, r = p + tau * d, r + tau * hd
            status = "boundary"
            break
        p, r = p_next, r + alpha * hd
        rr_next = r @ r
        if math.sqrt(rr_next) <= tol:
            break
        d = -r + (rr_next / rr) * d
        rr = rr_next
    # model value g.p + p.Hp/2 equals (g + r).p / 2 with r = g + Hp
    pred = -0.5 * ((g + r) @ p)
    return SteihaugResult(p, status, it, float(pred))


def compute_map(problem, z0=None, cfg=None, theta=None):
    """Minimize ``problem.objective(., theta)`` starting from ``z0``.

    Parameters
    ----------
    problem : BayesianInverseProblem
    z0 : array of shape (m,), optional
        Defaults to the prior mean.
    cfg : TrustRegionConfig, optional
    theta : array of shape (n,), optional
        Defaults to the nominal auxiliary parameters.

    Returns
    -------
    MapResult
        ``(map_point, history, converged)``.  When ``max_outer`` is hit a
        :class:`MaxOuterExceeded` warning is issued and the best iterate is
        returned with ``converged=False``.

    Notes
    -----
    Once the predicted reduction is within a few hundred ulps of the
    objective, the actual reduction is taken from the trapezoid rule
    ``-(g_k + g_new).s / 2``, which is exact for quadratics and immune to
    cancellation in ``J_k - J_new``.
    """
    cfg = TrustRegionConfig() if cfg is None else cfg
    z = problem.prior_mean_z.copy() if z0 is None else check_vector(z0, problem.m, "z0").copy()
    theta = problem.nominal_theta if theta is None else check_vector(theta, problem.n, "theta")

    def hess(point):
        return problem.hessian_operator(point, theta, cfg.gauss_newton)

    J = problem.objective(z, theta)
    g = problem.gradient_z(z, theta)
    g_norm = float(np.linalg.norm(g))
    if cfg.initial_radius is not None:
        radius = cfg.initial_radius
    else:
        curv = g @ hess(z).apply(g) if g_norm > 0 else 0.0
        radius = g_norm ** 3 / curv if curv > 0 else max(g_norm, 1.0)
    radius = min(radius, cfg.max_radius)
    history = [IterationRecord(0, J, g_norm, 0.0, 0, radius, True)]
    converged = g_norm <= cfg.grad_tol
    it = 0
    while not converged and it < cfg.max_outer:
        it += 1
        tol = min(cfg.cg_rel_tol, math.sqrt(g_norm))
        sub = steihaug_cg(g, hess(z), radius, tol, cfg.cg_max_iter)
        step, pred = sub.step, sub.predicted_reduction
        step_norm = float(np.linalg.norm(step))
        z_new = z + step
        g_new = None
        try:
            J_new = problem.objective(z_new, theta)
        except ForwardSolveFailure:
            J_new = math.inf
        if not math.isfinite(J_new) or pred <= 0.0:
            rho = -math.inf
        elif pred > 256.0 * _EPS * max(abs(J), 1.0):
            rho = (J - J_new) / pred
        else:
            g_new = problem.gradient_z(z_new, theta)
            rho = -0.5 * ((g + g_new) @ step) / pred
        accepted = rho > cfg.eta_accept
        if accepted:
            z, J = z_new, J_new
            g = problem.gradient_z(z, theta) if g_new is None else g_new
            g_norm = float(np.linalg.norm(g))
        if rho < 0.25:
            radius *= 0.5
        elif rho > 0.75 and sub.status != "interior":
            radius = min(2.0 * radius, cfg.max_radius)
        history.append(IterationRecord(it, J, g_norm, step_norm if accepted else 0.0,
                                       sub.iterations, radius, accepted))
        converged = g_norm <= cfg.grad_tol
        if not converged and radius <= _EPS * max(1.0, float(np.linalg.norm(z))):
            break
    if not converged:
        warnings.warn(f"MAP solve stopped after {it} iterations with gradient norm "
                      f"{g_norm:.3e} > {cfg.grad_tol:.1e}", MaxOuterExceeded, stacklevel=2)
    return MapResult(z, history, converged)


def history_rows(history):
    return [(r.iteration, float(r.objective), float(r.grad_norm), float(r.step_size),
             r.cg_iters, float(r.radius), int(r.accepted)) for r in history]


def write_history_csv(path, history, header=None):
    """Write the iteration history with one column per :class:`IterationRecord` field."""
    write_csv(path, HISTORY_COLUMNS, history_rows(history), header)


class MAPEstimator(BaseEstimator):
    """Estimator wrapper of :func:`compute_map`.

    Parameters mirror :class:`TrustRegionConfig`.

    Attributes
    ----------
    map_point_ : ndarray of shape (m,)
    history_ : list of IterationRecord
    converged_ : bool
    objective_ : float
    """

    def __init__(self, grad_tol=1e-7, max_outer=200, initial_radius=None, max_radius=1e10,
                 eta_accept=0.05, cg_rel_tol=0.5, cg_max_iter=None, gauss_newton=None):
        self.grad_tol = grad_tol
        self.max_outer = max_outer
        self.initial_radius = initial_radius
        self.max_radius = max_radius
        self.eta_accept = eta_accept
        self.cg_rel_tol = cg_rel_tol
        self.cg_max_iter = cg_max_iter
        self.gauss_newton = gauss_newton

    def config(self):
        return TrustRegionConfig(**self.get_params())

    def fit(self, problem, z0=None, theta=None):
        res = compute_map(problem, z0, self.config(), theta)
        self.map_point_ = res.map_point
        self.history_ = res.history
        self.converged_ = res.converged
        self.objective_ = res.history[-1].objective
        return self

    def predict(self, problem=None):
        """Return the fitted MAP point."""
        check_is_fitted(self, "map_point_")
        return self.map_point_
