import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayeshdsa.exceptions import TimeStepDiverged
from bayeshdsa.io import write_grid, read_grid
from bayeshdsa.linops import lanczos_tridiag
from bayeshdsa.models import (
    BiLaplacianPrior,
    SiaConstants,
    SiaFields,
    SiaGrid,
    SiaState,
    build_sia_model,
    hat_basis,
    jacobi_smooth,
    perturbed_fields,
    sia_forward,
    sia_step,
    sia_velocity,
)
from bayeshdsa.models.sia import default_truth, grid_operators

from fd_helpers import derivative_errors

SMALL = dict(nx=9, ny=9, dx_km=50.0, dy_km=50.0, T_years=4.0, nt=8, aux_nx=3, aux_ny=3,
             obs_every=2)


@pytest.fixture(scope="module")
def small():
    return build_sia_model(1, **SMALL)


def flat_fields(grid, s0, gamma=8.0, forcing=0.0, aux=3):
    basis, coords = hat_basis(grid, aux, aux)
    n = grid.size
    return SiaFields(np.broadcast_to(s0, n).astype(float).copy(), np.full(n, gamma),
                     np.full(n, forcing), basis, coords)


class TestConstantsAndGrid:
    def test_defaults(self):
        c = SiaConstants()
        assert (c.rho, c.g, c.flow_rate_A) == (910.0, 9.81, 1e-16)
        assert (c.perturbation_scale, c.prior_beta, c.prior_alpha) == (0.2, 1e-2, 9e-7)

    def test_positivity(self):
        with pytest.raises(ValueError):
            SiaConstants(rho=0.0)
        with pytest.raises(ValueError):
            SiaConstants(prior_alpha=-1.0)

    def test_grid(self):
        g = SiaGrid(5, 4, 20.0, 10.0, 10.0, 40)
        assert g.size == 20 and g.dx == 20000.0 and g.dt == 0.25
        assert g.lengths_km == (80.0, 30.0)
        f = g.refined(2)
        assert (f.nx, f.ny, f.nt, f.dx_km) == (9, 7, 80, 10.0)
        with pytest.raises(ValueError):
            SiaGrid(1, 4, 1.0, 1.0, 1.0, 1)


class TestBasis:
    def test_zero_theta_gives_nominal_fields(self):
        g = SiaGrid(7, 7, 10.0, 10.0, 1.0, 2)
        fields = flat_fields(g, 1000.0, gamma=7.5, forcing=0.3)
        gamma, forcing = perturbed_fields(np.zeros(2 * fields.n_aux), fields, SiaConstants())
        np.testing.assert_array_equal(gamma, fields.gamma_tilde)
        np.testing.assert_array_equal(forcing, fields.h_tilde)

    def test_unit_norm_on_unit_square(self):
        g = SiaGrid(161, 161, 1.0, 1.0, 1.0, 1)
        basis, coords = hat_basis(g, 5, 5)
        w = np.full(161, 1.0 / 160)
        w[[0, -1]] *= 0.5
        weights = np.kron(w, w)
        norms = np.sqrt(weights @ basis ** 2)
        # trapezoid rule on the fine grid; O(h^2) quadrature error
        np.testing.assert_allclose(norms, 1.0, rtol=1e-3)
        assert coords.shape == (25, 2)
        np.testing.assert_allclose(coords[-1], [160.0, 160.0])

    def test_hats_are_nodal(self):
        g = SiaGrid(9, 9, 1.0, 1.0, 1.0, 1)
        basis, _ = hat_basis(g, 3, 3)
        # the coarse nodes sit on fine nodes 0, 4, 8; each hat peaks only at its own node
        peaks = basis.reshape(9, 9, 9)[::4, ::4, :].reshape(9, 9)
        np.testing.assert_allclose(peaks, np.diag(np.diag(peaks)))


class TestForward:
    def test_flat_surface_constant_bed_is_steady(self):
        g = SiaGrid(6, 5, 10.0, 10.0, 2.0, 8)
        b = np.full(g.size, 120.0)
        state = sia_forward(b, np.zeros(18), SiaConstants(), g, flat_fields(g, 1120.0))
        np.testing.assert_allclose(state.surface, 1120.0, rtol=1e-14)

    def test_initial_slice_and_shape(self, small):
        state = small.state(small.b_init)
        assert state.surface.shape == (small.grid.nt + 1, small.grid.ny, small.grid.nx)
        np.testing.assert_array_equal(state.surface[0].ravel(), small.fields.s0)
        assert state.thickness.min() >= 0.0

    def test_semi_implicit_step_is_second_order_close_to_explicit(self):
        g = SiaGrid(5, 5, 10.0, 10.0, 1.0, 1)
        x, y = g.coords_km()
        s0 = (1500.0 + 300.0 * np.cos(x / 25.0) * np.sin(y / 30.0)).ravel()
        b = np.zeros(g.size)
        gamma = np.full(g.size, 8.0)
        forcing = np.full(g.size, 0.3)
        c = SiaConstants()
        ops = grid_operators(g)

        def explicit(dt):
            sx, sy = ops.grad_x @ s0, ops.grad_y @ s0
            q = np.exp(-gamma) * c.rho * c.g * s0 ** 2 + c.deformation_coeff * s0 ** 5 * (sx ** 2 + sy ** 2)
            flux = ops.face_diff.T @ ((ops.face_avg @ q) * ops.inv_h2 * (ops.face_diff @ s0))
            return s0 + dt * (forcing - flux)

        errs = [np.linalg.norm(sia_step(s0, b, gamma, forcing, dt, g, c) - explicit(dt))
                for dt in (1e-2, 5e-3, 2.5e-3)]
        np.testing.assert_allclose(errs[0] / errs[1], 4.0, rtol=0.02)
        np.testing.assert_allclose(errs[1] / errs[2], 4.0, rtol=0.02)

    @given(seed=st.integers(0, 10 ** 6))
    def test_thickness_stays_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        g = SiaGrid(7, 7, 20.0, 20.0, 5.0, 10)
        b = 200.0 * rng.standard_normal(g.size)
        s0 = b + np.maximum(rng.uniform(-200.0, 800.0, g.size), 0.0)
        fields = SiaFields(s0, np.full(g.size, 8.0), rng.uniform(0.0, 0.5, g.size),
                           hat_basis(g, 3, 3)[0])
        state = sia_forward(b, np.zeros(18), SiaConstants(), g, fields)
        assert state.thickness.min() >= 0.0

    def test_divergence_detected(self):
        g = SiaGrid(5, 5, 10.0, 10.0, 1.0, 2)
        fields = flat_fields(g, 1000.0, forcing=-1e6)
        with pytest.raises(TimeStepDiverged):
            sia_forward(np.zeros(g.size), np.zeros(18), SiaConstants(), g, fields)
        bad = flat_fields(g, np.nan)
        with pytest.raises(TimeStepDiverged):
            sia_forward(np.zeros(g.size), np.zeros(18), SiaConstants(), g, bad)


class TestVelocity:
    def _state(self, surface, bed, grid):
        surf = np.broadcast_to(surface.reshape(grid.ny, grid.nx), (grid.nt + 1, grid.ny, grid.nx))
        return SiaState(grid, surf.copy(), bed.reshape(grid.ny, grid.nx))

    def test_flat_surface(self):
        g = SiaGrid(4, 4, 1.0, 1.0, 1.0, 2)
        v = sia_velocity(self._state(np.full(16, 500.0), np.zeros(16), g), SiaConstants())
        np.testing.assert_array_equal(v, np.zeros(2 * 2 * 16))

    def test_zero_thickness(self):
        g = SiaGrid(4, 4, 1.0, 1.0, 1.0, 2)
        x, y = g.coords_km()
        s = (3.0 * x + y).ravel()
        v = sia_velocity(self._state(s, s, g), SiaConstants())
        np.testing.assert_array_equal(v, np.zeros(2 * 2 * 16))

    def test_unit_slope_unit_thickness(self):
        g = SiaGrid(5, 3, 1.0, 1.0, 1.0, 1)
        x, _ = g.coords_km()
        s = 1000.0 * x.ravel()  # s(x) = x in metres
        v = sia_velocity(self._state(s, s - 1.0, g), SiaConstants(), steps=[1])
        np.testing.assert_allclose(v[: g.size], -3.557142008247555e-05, rtol=1e-12)
        np.testing.assert_allclose(v[g.size:], 0.0, atol=1e-25)


class TestDerivatives:
    def test_tangent_matches_finite_difference(self, small):
        rng = np.random.default_rng(0)
        z = small.b_init
        jz, jt = small.jacobians(z)
        dx = rng.standard_normal(small.m)
        de = rng.standard_normal(small.n)
        h, ht = 1e-3, 1e-5
        fd_z = (small.forward(z + h * dx) - small.forward(z - h * dx)) / (2 * h)
        fd_t = (small.forward(z, ht * de) - small.forward(z, -ht * de)) / (2 * ht)
        np.testing.assert_allclose(jz @ dx, fd_z, rtol=1e-6, atol=1e-7 * np.abs(fd_z).max())
        np.testing.assert_allclose(jt @ de, fd_t, rtol=1e-5, atol=1e-6 * np.abs(fd_t).max())

    def test_adjoint_dot_product(self, small):
        rng = np.random.default_rng(1)
        z = small.b_init + 10.0 * rng.standard_normal(small.m)
        theta = 0.3 * rng.standard_normal(small.n)
        w = rng.standard_normal(small.d_dim)
        gz, gt = small.adjoint_products(z, theta, w)
        jz, jt = small.jacobians(z, theta)
        np.testing.assert_allclose(gz, jz.T @ w, rtol=1e-10, atol=1e-12 * np.abs(gz).max())
        np.testing.assert_allclose(gt, jt.T @ w, rtol=1e-10, atol=1e-12 * np.abs(gt).max())

    def test_exact_and_gauss_newton_hessians(self, small):
        rng = np.random.default_rng(2)
        z = small.b_init + 20.0 * rng.standard_normal(small.m)
        errs = derivative_errors(small, z, 0.2 * rng.standard_normal(small.n), rng)
        assert max(errs.values()) < 1e-4, errs
        x, y = rng.standard_normal(small.m), rng.standard_normal(small.m)
        a, b = small.hessian_vec(z, None, x) @ y, x @ small.hessian_vec(z, None, y)
        np.testing.assert_allclose(a, b, rtol=1e-8)
        op = small.misfit_hessian_operator(z)
        np.testing.assert_allclose(op.apply(x), small.misfit_hessian_vec(z, None, x), rtol=1e-12)
        assert small.gauss_newton_default

    def test_cache_returns_consistent_results(self, small):
        z = small.b_init + 1.0
        first = small.forward(z).copy()
        for k in range(6):
            small.forward(z + k)
        np.testing.assert_array_equal(small.forward(z), first)


class TestPrior:
    def test_spd_ritz_values(self, small):
        prior = small.prior_cov_z
        x = np.random.default_rng(0).standard_normal(small.m)
        _, alphas, betas, _ = lanczos_tridiag(prior, x, 30)
        t = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
        assert np.linalg.eigvalsh(t).min() > 0.0

    def test_inverse_diagonal_and_sqrt(self):
        g = SiaGrid(6, 5, 20.0, 20.0, 1.0, 1)
        prior = BiLaplacianPrior(g, 0.5, 1e-3)
        dense = prior.to_dense()
        x = np.random.default_rng(3).standard_normal(g.size)
        np.testing.assert_allclose(prior.apply_inverse(prior.apply(x)), x, rtol=1e-10)
        np.testing.assert_allclose(prior.diagonal(), np.diag(dense), rtol=1e-10)
        op = prior.operator.toarray()
        np.testing.assert_allclose(np.linalg.inv(op @ op), dense, rtol=1e-8, atol=1e-12 * np.abs(dense).max())
        root = prior.apply_symmetric_sqrt(x)
        np.testing.assert_allclose(prior.apply_sqrt(x), root, rtol=1e-8)

    def test_table_values_are_constants_defaults(self):
        g = SiaGrid(5, 5, 20.0, 20.0, 1.0, 1)
        p = build_sia_model(0, nx=5, ny=5, dx_km=20.0, dy_km=20.0, T_years=1.0, nt=2, aux_nx=2,
                            aux_ny=2, obs_every=1, prior_beta=None, prior_alpha=None)
        c = SiaConstants()
        ref = BiLaplacianPrior(g, c.prior_beta, c.prior_alpha)
        x = np.ones(25)
        np.testing.assert_allclose(p.prior_cov_z.apply(x), ref.apply(x), rtol=1e-12)


class TestBuilder:
    def test_shapes_and_meta(self, small):
        assert (small.m, small.n) == (81, 18)
        assert small.d_dim == 2 * 81 * 4
        meta = small.basis_meta()
        assert [m[0] for m in meta] == ["friction"] * 9 + ["forcing"] * 9
        assert meta[4][1:] == (200.0, 200.0)
        assert small.z_grid_shape == (9, 9)
        np.testing.assert_allclose(small.z_weight.norm(np.ones(81)), 400.0, rtol=1e-12)

    def test_prior_mean_is_smoothed_truth(self, small):
        expected = jacobi_smooth(small.b_true.reshape(9, 9), 10).ravel()
        np.testing.assert_array_equal(small.prior_mean_z, expected)

    def test_jacobi_smoothing_keeps_constants(self):
        np.testing.assert_allclose(jacobi_smooth(np.full((4, 6), 3.5), 7), 3.5)

    def test_deterministic(self):
        a = build_sia_model(5, **SMALL)
        b = build_sia_model(5, **SMALL)
        np.testing.assert_array_equal(a.data, b.data)

    def test_truth_from_grid_files(self, tmp_path):
        g = SiaGrid(9, 9, 50.0, 50.0, 4.0, 8)
        fine = g.refined(2)
        x, y = fine.coords_km()
        fields = default_truth(x, y, *fine.lengths_km)
        truth = {}
        for name, values in zip(("surface", "bedrock", "friction", "forcing"), fields):
            path = tmp_path / f"{name}.txt"
            write_grid(path, values, fine.dx_km, fine.dy_km)
            truth[name] = read_grid(path)
        from_files = build_sia_model(1, truth=truth, **SMALL)
        analytic = build_sia_model(1, **SMALL)
        np.testing.assert_allclose(from_files.b_true, analytic.b_true, rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(from_files.data, analytic.data, rtol=1e-8,
                                   atol=1e-8 * np.abs(analytic.data).max())
