"""Shallow-ice bedrock inversion on a uniform rectangular grid.

The surface height ``s`` obeys

    ds/dt - div(Q(s) grad s) = h_flux,      zero-flux boundaries,
    Q(s) = exp(-gamma) rho g H^2 + (2 A (rho g)^3 / 5) H^5 |grad s|^2,

with thickness ``H = s - b``.  Time stepping is semi-implicit: ``Q`` is
evaluated at the old surface, face diffusivities are arithmetic means of
nodal values, and one sparse linear solve advances each step.  Thickness is
clamped at zero after every step.  Observations are the surface velocities

    v = -(1/2) A (rho g)^3 H^4 |grad s|^2 grad s

at every node for a subset of time steps.

Friction ``gamma`` and forcing ``h_flux`` are nominal fields scaled by
``1 + 0.2 * sum_j theta_j phi_j`` where the ``phi_j`` are bilinear hat
functions on a coarse auxiliary grid.  Units: heights in m, horizontal
spacing given in km (converted internally), time in years.

Derivatives of the discrete forward map are exact: the per-step sparse
matrices built during a solve give a tangent-linear propagation for full
Jacobians and a discrete adjoint for transposed products.  Second
derivatives are central differences of adjoint products.
"""

import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .._validation import check_int, check_positive, check_rng, check_vector
from ..exceptions import TimeStepDiverged
from ..linops import (
    SpdOperator,
    SparseSpdOperator,
    SymmetricOperator,
    WeightedNorm,
    identity_operator,
    diagonal_operator,
    lanczos_sqrt_apply,
    mass_matrix_2d,
)
from .base import BayesianInverseProblem


@dataclass(frozen=True)
class SiaConstants:
    """Physical constants and prior hyper-parameters of the ice model.

    ``flow_rate_A`` is applied per unit of the model time (years).
    """

    rho: float = 910.0
    g: float = 9.81
    flow_rate_A: float = 1e-16
    perturbation_scale: float = 0.2
    prior_beta: float = 1e-2
    prior_alpha: float = 9e-7

    def __post_init__(self):
        for name in ("rho", "g", "flow_rate_A", "perturbation_scale", "prior_beta", "prior_alpha"):
            check_positive(getattr(self, name), name)

    @property
    def deformation_coeff(self):
        """``2 A (rho g)^3 / 5``, the prefactor of the deformation diffusivity."""
        return 2.0 * self.flow_rate_A * (self.rho * self.g) ** 3 / 5.0

    @property
    def velocity_coeff(self):
        """``-A (rho g)^3 / 2``, the prefactor of the surface velocity."""
        return -0.5 * self.flow_rate_A * (self.rho * self.g) ** 3


@dataclass(frozen=True)
class SiaGrid:
    """Uniform space-time grid; node ``(j, i)`` is flattened to ``j * nx + i``."""

    nx: int
    ny: int
    dx_km: float
    dy_km: float
    T_years: float
    nt: int

    def __post_init__(self):
        check_int(self.nx, "nx", 2)
        check_int(self.ny, "ny", 2)
        check_int(self.nt, "nt", 1)
        for name in ("dx_km", "dy_km", "T_years"):
            check_positive(getattr(self, name), name)

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def dx(self):
        return 1000.0 * self.dx_km

    @property
    def dy(self):
        return 1000.0 * self.dy_km

    @property
    def dt(self):
        return self.T_years / self.nt

    @property
    def times(self):
        return np.linspace(0.0, self.T_years, self.nt + 1)

    @property
    def lengths_km(self):
        return (self.nx - 1) * self.dx_km, (self.ny - 1) * self.dy_km

    def coords_km(self):
        """Node coordinates ``(x, y)`` in km, each of shape ``(ny, nx)``."""
        x = np.arange(self.nx) * self.dx_km
        y = np.arange(self.ny) * self.dy_km
        return np.meshgrid(x, y)

    def refined(self, factor=2):
        """Same domain and horizon with ``factor`` times finer spacing and step."""
        return SiaGrid((self.nx - 1) * factor + 1, (self.ny - 1) * factor + 1,
                       self.dx_km / factor, self.dy_km / factor, self.T_years, self.nt * factor)


@dataclass(frozen=True)
class SiaState:
    """Surface trajectory, shape ``(nt + 1, ny, nx)``, and the bedrock it sits on."""

    grid: SiaGrid
    surface: np.ndarray
    bedrock: np.ndarray

    @property
    def thickness(self):
        return self.surface - self.bedrock[None]


class _GridOperators:
    """Sparse difference operators of one grid (built once and shared)."""

    def __init__(self, grid):
        nx, ny = grid.nx, grid.ny
        ix, iy = sp.identity(nx, format="csr"), sp.identity(ny, format="csr")
        dx1 = sp.diags([-np.ones(nx - 1), np.ones(nx - 1)], [0, 1], shape=(nx - 1, nx))
        dy1 = sp.diags([-np.ones(ny - 1), np.ones(ny - 1)], [0, 1], shape=(ny - 1, ny))
        # face differences: x-faces first, then y-faces
        self.face_diff = sp.vstack([sp.kron(iy, dx1), sp.kron(dy1, ix)], format="csr")
        n_xf, n_yf = ny * (nx - 1), (ny - 1) * nx
        self.inv_h2 = np.concatenate([np.full(n_xf, 1.0 / grid.dx ** 2),
                                      np.full(n_yf, 1.0 / grid.dy ** 2)])
        self.face_avg = 0.5 * abs(self.face_diff)
        self.face_avg = self.face_avg.tocsr()
        self.grad_x = sp.kron(iy, _node_gradient_1d(nx, grid.dx), format="csr")
        self.grad_y = sp.kron(_node_gradient_1d(ny, grid.dy), ix, format="csr")
        self.identity = sp.identity(grid.size, format="csr")

    def laplacian_neg(self, inv_h2=None):
        """Negative Laplacian with zero-Neumann boundaries (SPD up to constants)."""
        w = self.inv_h2 if inv_h2 is None else inv_h2
        return (self.face_diff.T @ sp.diags(w) @ self.face_diff).tocsr()


def _node_gradient_1d(n, h):
    """First-derivative stencil: central inside, one-sided at the two ends."""
    rows = [0, 0, n - 1, n - 1]
    cols = [0, 1, n - 2, n - 1]
    vals = [-1.0, 1.0, -1.0, 1.0]
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5, 0.5]
    return sp.csr_matrix((np.array(vals) / h, (rows, cols)), shape=(n, n))


_OPERATOR_CACHE = {}
_OPERATOR_LOCK = threading.Lock()


def grid_operators(grid):
    with _OPERATOR_LOCK:
        ops = _OPERATOR_CACHE.get(grid)
        if ops is None:
            ops = _OPERATOR_CACHE[grid] = _GridOperators(grid)
        return ops


# ----------------------------------------------------------------------
# auxiliary basis


def hat_basis(grid, aux_nx, aux_ny):
    """Bilinear hat functions of a coarse ``aux_nx x aux_ny`` grid at ``grid``'s nodes.

    Functions are scaled to unit L2 norm on the domain mapped to the unit
    square.  Returns the ``(grid.size, aux_nx * aux_ny)`` matrix and the km
    coordinates of the coarse nodes.
    """
    aux_nx, aux_ny = check_int(aux_nx, "aux_nx", 2), check_int(aux_ny, "aux_ny", 2)
    xs = np.linspace(0.0, 1.0, grid.nx)
    ys = np.linspace(0.0, 1.0, grid.ny)
    hx = _hat_matrix_1d(xs, aux_nx)
    hy = _hat_matrix_1d(ys, aux_ny)
    basis = np.kron(hy, hx)
    # squared L2 norms of 1-D hats on [0, 1]: 2H/3 inside, H/3 at the ends
    nx_norm = np.full(aux_nx, 2.0 / 3.0) / (aux_nx - 1)
    nx_norm[[0, -1]] *= 0.5
    ny_norm = np.full(aux_ny, 2.0 / 3.0) / (aux_ny - 1)
    ny_norm[[0, -1]] *= 0.5
    basis = basis / np.sqrt(np.kron(ny_norm, nx_norm))[None, :]
    lx, ly = grid.lengths_km
    cx, cy = np.meshgrid(np.linspace(0, lx, aux_nx), np.linspace(0, ly, aux_ny))
    return basis, np.column_stack([cx.ravel(), cy.ravel()])


def _hat_matrix_1d(points, n_coarse):
    nodes = np.linspace(0.0, 1.0, n_coarse)
    h = nodes[1] - nodes[0]
    return np.clip(1.0 - np.abs(points[:, None] - nodes[None, :]) / h, 0.0, None)


@dataclass(frozen=True)
class SiaFields:
    """Nominal inputs on one grid: initial surface, log friction, forcing, hat basis."""

    s0: np.ndarray
    gamma_tilde: np.ndarray
    h_tilde: np.ndarray
    basis: np.ndarray
    aux_coords: np.ndarray = field(default=None)

    @property
    def n_aux(self):
        return self.basis.shape[1]


def perturbed_fields(theta, fields, consts):
    """Friction and forcing after the multiplicative hat-function perturbation."""
    n_aux = fields.n_aux
    theta = check_vector(theta, 2 * n_aux, "theta")
    k = consts.perturbation_scale
    delta_f = 1.0 + k * (fields.basis @ theta[:n_aux])
    delta_h = 1.0 + k * (fields.basis @ theta[n_aux:])
    return fields.gamma_tilde * delta_f, fields.h_tilde * delta_h


# ----------------------------------------------------------------------
# forward solve with stored linearization


class _Trajectory:
    """One forward solve plus the per-step matrices needed for derivatives."""

    def __init__(self, grid, consts, fields, b, theta, obs_steps, clamp_tol, keep_linearization):
        ops = grid_operators(grid)
        self.grid, self.consts, self.fields, self.ops = grid, consts, fields, ops
        self.b = b
        self.theta = theta
        self.gamma, self.h_flux = perturbed_fields(theta, fields, consts)
        self.obs_steps = tuple(obs_steps)
        dt = grid.dt
        rho_g = consts.rho * consts.g
        c5 = consts.deformation_coeff
        slide = np.exp(-self.gamma) * rho_g

        s = np.maximum(fields.s0, b)
        self.mask0 = fields.s0 < b
        self.surfaces = [s]
        self.steps = []
        for _ in range(grid.nt):
            thick = s - b
            sx, sy = ops.grad_x @ s, ops.grad_y @ s
            g2 = sx * sx + sy * sy
            q = slide * thick ** 2 + c5 * thick ** 5 * g2
            d_face = ops.face_avg @ q
            mat = (ops.identity + dt * ops.face_diff.T @ sp.diags(d_face * ops.inv_h2)
                   @ ops.face_diff).tocsc()
            try:
                lu = spla.splu(mat)
            except RuntimeError as exc:
                raise TimeStepDiverged(f"linear solve failed: {exc}") from exc
            s_new = lu.solve(s + dt * self.h_flux)
            if not np.all(np.isfinite(s_new)):
                raise TimeStepDiverged("non-finite surface height")
            deficit = (s_new - b).min()
            if deficit < -clamp_tol:
                raise TimeStepDiverged(f"thickness {deficit:.3e} m below the clamp tolerance")
            clamp = s_new < b
            if keep_linearization:
                q_h = 2.0 * slide * thick + 5.0 * c5 * thick ** 4 * g2
                q_g2 = c5 * thick ** 5
                q_s = (sp.diags(q_h) + sp.diags(2.0 * q_g2 * sx) @ ops.grad_x
                       + sp.diags(2.0 * q_g2 * sy) @ ops.grad_y).tocsr()
                # L(dD) s_new = G dD with G = -Df^T diag(Df s_new / h^2)
                g_mat = -(ops.face_diff.T @ sp.diags((ops.face_diff @ s_new) * ops.inv_h2))
                k_mat = (g_mat @ ops.face_avg).tocsr()
                self.steps.append(dict(lu=lu, k=k_mat, q_s=q_s, q_h=q_h,
                                       q_gamma=-slide * thick ** 2, clamp=clamp))
            s = np.where(clamp, b, s_new)
            self.surfaces.append(s)
        self._obs_cache = {}

    # observation model ------------------------------------------------
    def velocity(self, step):
        s = self.surfaces[step]
        ops = self.ops
        thick = s - self.b
        sx, sy = ops.grad_x @ s, ops.grad_y @ s
        amp = self.consts.velocity_coeff * thick ** 4 * (sx * sx + sy * sy)
        return np.concatenate([amp * sx, amp * sy])

    def observations(self):
        return np.concatenate([self.velocity(k) for k in self.obs_steps])

    def _obs_matrices(self, step):
        hit = self._obs_cache.get(step)
        if hit is not None:
            return hit
        s = self.surfaces[step]
        ops = self.ops
        thick = s - self.b
        sx, sy = ops.grad_x @ s, ops.grad_y @ s
        g2 = sx * sx + sy * sy
        c = self.consts.velocity_coeff
        dg2 = sp.diags(2.0 * sx) @ ops.grad_x + sp.diags(2.0 * sy) @ ops.grad_y
        blocks_s, blocks_b = [], []
        for comp, grad in ((sx, ops.grad_x), (sy, ops.grad_y)):
            dh = c * 4.0 * thick ** 3 * g2 * comp
            vs = (sp.diags(dh) + sp.diags(c * thick ** 4 * comp) @ dg2
                  + sp.diags(c * thick ** 4 * g2) @ grad)
            blocks_s.append(vs)
            blocks_b.append(-dh)
        hit = (sp.vstack(blocks_s, format="csr"), np.concatenate(blocks_b))
        self._obs_cache[step] = hit
        return hit

    # derivatives ------------------------------------------------------
    def tangent(self, db, dtheta):
        """Directional derivatives of the observations for a block of directions."""
        n_aux = self.fields.n_aux
        k = self.consts.perturbation_scale
        dt = self.grid.dt
        dgamma = k * self.fields.gamma_tilde[:, None] * (self.fields.basis @ dtheta[:n_aux])
        dh = k * self.fields.h_tilde[:, None] * (self.fields.basis @ dtheta[n_aux:])
        ds = np.where(self.mask0[:, None], db, 0.0)
        wanted = set(self.obs_steps)
        out = {}
        if 0 in wanted:
            out[0] = self._obs_tangent(0, ds, db)
        for step, lin in enumerate(self.steps, start=1):
            dq = lin["q_s"] @ ds - lin["q_h"][:, None] * db + lin["q_gamma"][:, None] * dgamma
            rhs = ds + dt * (lin["k"] @ dq) + dt * dh
            ds_new = lin["lu"].solve(rhs)
            ds = np.where(lin["clamp"][:, None], db, ds_new)
            if step in wanted:
                out[step] = self._obs_tangent(step, ds, db)
        return np.vstack([out[k_] for k_ in self.obs_steps])

    def _obs_tangent(self, step, ds, db):
        vs, vb = self._obs_matrices(step)
        n = self.grid.size
        return vs @ ds + np.concatenate([vb[:n, None] * db, vb[n:, None] * db])

    def adjoint(self, w):
        """Transposed Jacobian applied to a data-space vector: ``(J_b^T w, J_theta^T w)``."""
        n = self.grid.size
        n_obs = 2 * n
        weights = {k: w[i * n_obs:(i + 1) * n_obs] for i, k in enumerate(self.obs_steps)}
        dt = self.grid.dt
        g_b = np.zeros(n)
        g_gamma = np.zeros(n)
        g_h = np.zeros(n)

        def add_obs(step, lam):
            wk = weights.get(step)
            if wk is None:
                return lam
            vs, vb = self._obs_matrices(step)
            g_b[:] += vb[:n] * wk[:n] + vb[n:] * wk[n:]
            return lam + vs.T @ wk

        lam = add_obs(len(self.steps), np.zeros(n))
        for step in range(len(self.steps) - 1, -1, -1):
            lin = self.steps[step]
            clamp = lin["clamp"]
            g_b += np.where(clamp, lam, 0.0)
            mu = lin["lu"].solve(np.where(clamp, 0.0, lam), trans="T")
            kt_mu = lin["k"].T @ mu
            g_b -= dt * lin["q_h"] * kt_mu
            g_gamma += dt * lin["q_gamma"] * kt_mu
            g_h += dt * mu
            lam = mu + dt * (lin["q_s"].T @ kt_mu)
            lam = add_obs(step, lam)
        g_b += np.where(self.mask0, lam, 0.0)
        k = self.consts.perturbation_scale
        basis = self.fields.basis
        g_theta = np.concatenate([k * basis.T @ (self.fields.gamma_tilde * g_gamma),
                                  k * basis.T @ (self.fields.h_tilde * g_h)])
        return g_b, g_theta

    def state(self):
        g = self.grid
        return SiaState(g, np.stack(self.surfaces).reshape(g.nt + 1, g.ny, g.nx),
                        self.b.reshape(g.ny, g.nx))


def sia_forward(b, theta, consts, grid, fields, clamp_tol=1e3):
    """Integrate the shallow-ice equation and return the surface trajectory.

    Parameters
    ----------
    b : array of shape (grid.size,)
        Bedrock elevation (m).
    theta : array of shape (2 * fields.n_aux,)
        Friction block followed by forcing block.
    consts : SiaConstants
    grid : SiaGrid
    fields : SiaFields
        Nominal fields on ``grid``.
    clamp_tol : float
        Largest tolerated undershoot (m) of the surface below the bed before
        clamping; beyond it the step is declared diverged.

    Raises
    ------
    TimeStepDiverged
    """
    b = check_vector(b, grid.size, "b")
    traj = _Trajectory(grid, consts, fields, b, theta, (), clamp_tol, keep_linearization=False)
    return traj.state()


def sia_step(s, b, gamma, h_flux, dt, grid, consts):
    """Advance a surface by one semi-implicit step (no clamping)."""
    ops = grid_operators(grid)
    thick = s - b
    g2 = (ops.grad_x @ s) ** 2 + (ops.grad_y @ s) ** 2
    q = np.exp(-gamma) * consts.rho * consts.g * thick ** 2 + consts.deformation_coeff * thick ** 5 * g2
    d_face = ops.face_avg @ q
    mat = ops.identity + dt * ops.face_diff.T @ sp.diags(d_face * ops.inv_h2) @ ops.face_diff
    return spla.spsolve(mat.tocsc(), s + dt * h_flux)


def sia_velocity(state, consts, steps=None):
    """Stacked surface velocities ``[v_x, v_y]`` at every node for each step in ``steps``.

    ``steps`` defaults to all steps after the initial one.
    """
    grid = state.grid
    ops = grid_operators(grid)
    steps = range(1, grid.nt + 1) if steps is None else steps
    b = state.bedrock.ravel()
    c = consts.velocity_coeff
    out = []
    for k in steps:
        s = state.surface[k].ravel()
        thick = s - b
        sx, sy = ops.grad_x @ s, ops.grad_y @ s
        amp = c * thick ** 4 * (sx * sx + sy * sy)
        out.append(np.concatenate([amp * sx, amp * sy]))
    return np.concatenate(out)


def jacobi_smooth(values, sweeps=10):
    """Damped Jacobi smoothing with reflecting boundaries on a 2-D field."""
    v = np.array(values, dtype=float)
    for _ in range(sweeps):
        p = np.pad(v, 1, mode="edge")
        v = 0.5 * v + 0.125 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
    return v


# ----------------------------------------------------------------------
# prior


class BiLaplacianPrior(SpdOperator):
    """Covariance ``(beta * (-Laplacian) + alpha * I)^{-2}`` with Neumann boundaries.

    The Laplacian uses km spacing.  Products need two sparse solves, the
    precision needs two sparse products, and factor products for sampling
    run Lanczos with ``sqrt_steps`` steps.
    """

    def __init__(self, grid, beta, alpha, sqrt_steps=None):
        ops = grid_operators(grid)
        inv_h2_km = ops.inv_h2 * 1e6
        self.operator = (beta * ops.laplacian_neg(inv_h2_km) + alpha * ops.identity).tocsc()
        self._lu = spla.splu(self.operator)
        self.sqrt_steps = min(grid.size, 100) if sqrt_steps is None else sqrt_steps
        a, lu = self.operator, self._lu
        super().__init__(
            grid.size,
            apply=lambda x: lu.solve(lu.solve(x)),
            apply_inverse=lambda x: a @ (a @ x),
            apply_sqrt=lambda x: lanczos_sqrt_apply(self, x, self.sqrt_steps),
            diagonal=self._exact_diagonal,
            blockwise=False,
            name="BiLaplacianPrior",
        )

    def apply(self, x):
        x = self._check_input(x)
        return self._lu.solve(self._lu.solve(x))

    def apply_inverse(self, x):
        x = self._check_input(x)
        return self.operator @ (self.operator @ x)

    def apply_symmetric_sqrt(self, x):
        """Exact ``Gamma^{1/2} x``, i.e. one solve with the elliptic operator."""
        return self._lu.solve(self._check_input(x))

    def _exact_diagonal(self):
        inv = self._lu.solve(np.eye(self.dim))
        return np.sum(inv * inv, axis=0)


# ----------------------------------------------------------------------
# inverse problem


def default_truth(x_km, y_km, lx, ly):
    """Analytic synthetic fields ``(s0, bedrock, log_friction, forcing)`` at km coordinates."""
    u, v = x_km / lx, y_km / ly
    s0 = 700.0 + 1900.0 * np.exp(-((u - 0.3) ** 2 / 0.35 + (v - 0.6) ** 2 / 0.45))
    bed = (120.0 * np.sin(2.0 * np.pi * u) * np.cos(1.5 * np.pi * v)
           + 260.0 * np.exp(-((u - 0.72) ** 2 + (v - 0.3) ** 2) / 0.015) - 150.0 * v)
    gamma = 8.0 + 1.0 * np.cos(np.pi * u) * np.sin(np.pi * v) - 0.6 * u
    forcing = 0.3 + 0.15 * np.cos(np.pi * v) + 0.1 * u
    return s0, bed, gamma, forcing


class ShallowIceProblem(BayesianInverseProblem):
    """Bedrock inversion from surface velocities of the shallow-ice model."""

    gauss_newton_default = True

    def __init__(self, grid, consts, fields, data, noise_std, obs_steps, prior_cov,
                 prior_mean, b_true=None, b_init=None, fd_rel_step=1e-5, clamp_tol=1e3,
                 cache_size=4):
        self.grid = grid
        self.consts = consts
        self.fields = fields
        self.obs_steps = tuple(int(k) for k in obs_steps)
        self.noise_std = float(noise_std)
        self.b_true = b_true
        self.b_init = b_init if b_init is not None else np.array(prior_mean, dtype=float)
        self.fd_rel_step = fd_rel_step
        self.clamp_tol = clamp_tol
        n_theta = 2 * fields.n_aux
        lx, ly = grid.lengths_km
        super().__init__(
            data=data,
            noise_cov=diagonal_operator(np.full(len(data), noise_std ** 2)),
            prior_mean_z=prior_mean,
            prior_cov_z=prior_cov,
            prior_mean_theta=np.zeros(n_theta),
            prior_cov_theta=identity_operator(n_theta),
            nominal_theta=np.zeros(n_theta),
            z_weight=WeightedNorm(SparseSpdOperator(mass_matrix_2d(grid.nx, grid.ny, lx, ly),
                                                    name="MassMatrix")),
        )
        self._cache = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    # trajectories are cached per point; everything stored is immutable
    def trajectory(self, z, theta=None):
        z, theta = self._point(z, theta)
        key = (z.tobytes(), theta.tobytes())
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        traj = _Trajectory(self.grid, self.consts, self.fields, z, theta, self.obs_steps,
                           self.clamp_tol, keep_linearization=True)
        with self._lock:
            self._cache[key] = traj
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return traj

    def jacobians(self, z, theta=None):
        """Dense ``(J_z, J_theta)`` of the observations at one point."""
        traj = self.trajectory(z, theta)
        jac = getattr(traj, "_jacobians", None)
        if jac is None:
            m, n = self.m, self.n
            full = traj.tangent(np.hstack([np.eye(m), np.zeros((m, n))]),
                                np.hstack([np.zeros((n, m)), np.eye(n)]))
            jac = traj._jacobians = (np.ascontiguousarray(full[:, :m]),
                                     np.ascontiguousarray(full[:, m:]))
        return jac

    def forward(self, z, theta=None):
        return self.trajectory(z, theta).observations()

    def jac_z_vec(self, z, theta, x):
        return self.jacobians(z, theta)[0] @ x

    def jac_z_adjoint_vec(self, z, theta, y):
        return self.jacobians(z, theta)[0].T @ y

    def jac_theta_vec(self, z, theta, e):
        return self.jacobians(z, theta)[1] @ e

    def adjoint_products(self, z, theta, y):
        """``(J_z^T y, J_theta^T y)`` by one backward sweep, without forming Jacobians."""
        return self.trajectory(z, theta).adjoint(y)

    def _fd_adjoint(self, z, theta, y, dz, dtheta):
        scale = max(np.abs(dz).max(), np.abs(dtheta).max())
        if scale == 0.0:
            return np.zeros(self.m)
        h = self.fd_rel_step * (1.0 + max(np.abs(z).max(), np.abs(theta).max())) / scale
        plus = _Trajectory(self.grid, self.consts, self.fields, z + h * dz, theta + h * dtheta,
                           self.obs_steps, self.clamp_tol, True).adjoint(y)[0]
        minus = _Trajectory(self.grid, self.consts, self.fields, z - h * dz, theta - h * dtheta,
                            self.obs_steps, self.clamp_tol, True).adjoint(y)[0]
        return (plus - minus) / (2.0 * h)

    def second_zz(self, z, theta, y, x):
        return self._fd_adjoint(z, theta, y, x, np.zeros(self.n))

    def second_ztheta(self, z, theta, y, e):
        return self._fd_adjoint(z, theta, y, np.zeros(self.m), e)

    def misfit_hessian_vec(self, z, theta, x, gauss_newton=None):
        if not self._use_gn(gauss_newton):
            return super().misfit_hessian_vec(z, theta, x, gauss_newton)
        z, theta = self._point(z, theta)
        jz = self.jacobians(z, theta)[0]
        return jz.T @ ((jz @ check_vector(x, self.m, "x")) / self.noise_std ** 2)

    def misfit_hessian_operator(self, z, theta=None, gauss_newton=None):
        if not self._use_gn(gauss_newton):
            return super().misfit_hessian_operator(z, theta, gauss_newton)
        jz = self.jacobians(z, theta)[0]
        prec = 1.0 / self.noise_std ** 2
        return SymmetricOperator(self.m, lambda x: jz.T @ (prec * (jz @ x)), blockwise=True,
                                 name="GaussNewtonMisfitHessian")

    def state(self, z, theta=None):
        return self.trajectory(z, theta).state()

    def basis_meta(self):
        coords = self.fields.aux_coords
        return ([("friction", float(x), float(y)) for x, y in coords]
                + [("forcing", float(x), float(y)) for x, y in coords])

    @property
    def z_grid_shape(self):
        return (self.grid.ny, self.grid.nx)


def _sample_truth(truth, grid):
    x, y = grid.coords_km()
    lx, ly = grid.lengths_km
    if truth is None:
        return [f.ravel() for f in default_truth(x, y, lx, ly)]
    out = []
    for name in ("surface", "bedrock", "friction", "forcing"):
        values, dx_km, dy_km = truth[name]
        values = np.asarray(values, dtype=float)
        gx = np.arange(values.shape[1]) * dx_km
        gy = np.arange(values.shape[0]) * dy_km
        interp = RegularGridInterpolator((gy, gx), values, bounds_error=False, fill_value=None)
        out.append(interp(np.column_stack([y.ravel(), x.ravel()])))
    return out


# prior hyper-parameters for the 400 km desk-scale domain (Laplacian in km)
DESK_PRIOR_BETA = 0.6
DESK_PRIOR_ALPHA = 6e-4


def build_sia_model(seed, nx=21, ny=21, dx_km=20.0, dy_km=20.0, T_years=10.0, nt=40,
                    aux_nx=5, aux_ny=5, obs_every=5, noise_rel=0.05, consts=None,
                    truth=None, smoothing_sweeps=10, refine=2, sqrt_steps=None,
                    prior_beta=DESK_PRIOR_BETA, prior_alpha=DESK_PRIOR_ALPHA):
    """Desk-scale synthetic bedrock inversion.

    Data are simulated on a grid ``refine`` times finer in space and time,
    restricted to the inversion grid at every ``obs_every``-th step, and
    perturbed with Gaussian noise whose standard deviation is ``noise_rel``
    times the RMS of the clean velocities.  The prior mean and initial
    guess is the true bedrock after ``smoothing_sweeps`` Jacobi sweeps.

    ``truth`` optionally maps ``surface``, ``bedrock``, ``friction`` and
    ``forcing`` to ``(values, dx_km, dy_km)`` grids; they are bilinearly
    interpolated.  Otherwise :func:`default_truth` is used.

    ``prior_beta`` and ``prior_alpha`` replace the hyper-parameters in
    ``consts``; the defaults give a prior standard deviation of roughly
    300 m on a 400 km domain.  Pass ``None`` to keep the values in ``consts``.
    """
    consts = SiaConstants() if consts is None else consts
    consts = replace(consts,
                     prior_beta=consts.prior_beta if prior_beta is None else prior_beta,
                     prior_alpha=consts.prior_alpha if prior_alpha is None else prior_alpha)
    rng = check_rng(seed)
    grid = SiaGrid(nx, ny, dx_km, dy_km, T_years, nt)
    fine = grid.refined(refine)
    obs_steps = list(range(obs_every, nt + 1, obs_every))

    s0_f, b_f, gam_f, h_f = _sample_truth(truth, fine)
    basis_f, _ = hat_basis(fine, aux_nx, aux_ny)
    fine_fields = SiaFields(s0_f, gam_f, h_f, basis_f)
    fine_traj = _Trajectory(fine, consts, fine_fields, b_f, np.zeros(2 * basis_f.shape[1]),
                            [refine * k for k in obs_steps], 1e3, keep_linearization=False)
    # restrict fine-grid velocities to the coarse nodes (they coincide)
    sub = np.zeros((fine.ny, fine.nx), dtype=bool)
    sub[::refine, ::refine] = True
    sub = sub.ravel()
    clean = []
    for k in fine_traj.obs_steps:
        v = fine_traj.velocity(k)
        clean.append(np.concatenate([v[: fine.size][sub], v[fine.size:][sub]]))
    clean = np.concatenate(clean)
    noise_std = noise_rel * np.sqrt(np.mean(clean ** 2))
    data = clean + noise_std * rng.standard_normal(clean.shape)

    s0, b_true, gamma, forcing = _sample_truth(truth, grid)
    basis, aux_coords = hat_basis(grid, aux_nx, aux_ny)
    fields = SiaFields(s0, gamma, forcing, basis, aux_coords)
    b_init = jacobi_smooth(b_true.reshape(ny, nx), smoothing_sweeps).ravel()
    prior = BiLaplacianPrior(grid, consts.prior_beta, consts.prior_alpha, sqrt_steps)
    return ShallowIceProblem(grid, consts, fields, data, noise_std, obs_steps, prior,
                             prior_mean=b_init, b_true=b_true, b_init=b_init)
