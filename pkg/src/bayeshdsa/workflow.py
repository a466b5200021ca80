"""End-to-end pipeline: MAP point, subspace, sensitivities, samples, variances.

:class:`HDSAWorkflow` chains the estimators in memory.  :class:`ExperimentRunner`
runs the same stages from an :class:`~bayeshdsa.config.ExperimentConfig`
and writes plain-text artifacts, reusing upstream artifacts from earlier
invocations when their header matches the current configuration and seed.
"""

import os
import warnings

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, MaxOuterExceeded
from .ghep import EigenPairs, GhepConfig, LikelihoodInformedSubspace, solve_ghep
from .hdsa import (
    SCAN_COLUMNS,
    HyperDifferentialSensitivity,
    scalar_sensitivity_scan,
    sensitivity_indices,
    regression_identity_check,
)
from .io import read_grid, read_header, write_csv, write_grid, write_manifest
from .laplace import LaplacePosterior
from .map_solver import MAPEstimator, TrustRegionConfig, compute_map, write_history_csv
from .models import (
    SiaConstants,
    build_linear_model,
    build_scalar_exp_model,
    build_sia_model,
)

STAGES = ("map", "lis", "hdsa", "sample", "variance")


class HDSAWorkflow(BaseEstimator):
    """MAP estimate, likelihood-informed subspace, sensitivities and posterior.

    Each step is a cloned copy of the estimator passed in.

    Attributes
    ----------
    map_point_ : ndarray of shape (m,)
    eigenpairs_ : EigenPairs
    report_ : SensitivityReport
    posterior_ : LaplacePosterior
    """

    def __init__(self, map_estimator=None, subspace=None, sensitivity=None, posterior=None):
        self.map_estimator = map_estimator
        self.subspace = subspace
        self.sensitivity = sensitivity
        self.posterior = posterior

    def fit(self, problem, z0=None):
        est = clone(self.map_estimator or MAPEstimator()).fit(problem, z0)
        self.map_estimator_ = est
        self.map_point_ = est.map_point_
        lis = clone(self.subspace or LikelihoodInformedSubspace()).fit(problem, self.map_point_)
        self.subspace_ = lis
        self.eigenpairs_ = lis.eigenpairs_
        sens = clone(self.sensitivity or HyperDifferentialSensitivity(grad_tol=est.grad_tol))
        self.sensitivity_ = sens.fit(problem, self.map_point_, self.eigenpairs_)
        self.report_ = self.sensitivity_.report_
        post = clone(self.posterior or LaplacePosterior())
        self.posterior_ = post.fit(problem, self.map_point_, self.eigenpairs_)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "report_")
        return self.report_.indices


# ----------------------------------------------------------------------
# configuration-driven runs


def _stage_seeds(seed):
    model, ghep, sample, variance = np.random.SeedSequence(seed).spawn(4)
    return dict(model=model, ghep=ghep, sample=sample, variance=variance)


def build_problem(cfg, seed=None):
    """Instantiate the inverse problem described by ``cfg``."""
    params = dict(cfg.model_params)
    seed = _stage_seeds(cfg.seed)["model"] if seed is None else seed
    if cfg.model == "scalar_exp":
        theta = None
        if "theta1" in params or "theta2" in params:
            theta = np.array([params.pop("theta1", 5.0), params.pop("theta2", 1.0)])
        return build_scalar_exp_model(seed, nominal_theta=theta, **params)
    if cfg.model == "linear":
        dims = {k: params.pop(k, v) for k, v in (("m", 20), ("n", 5), ("d_dim", 15))}
        return build_linear_model(seed=seed, **dims, **params)
    const_keys = ("rho", "g", "flow_rate_A", "perturbation_scale")
    consts = SiaConstants(**{k: params.pop(k) for k in const_keys if k in params})
    truth = None
    if "truth_surface" in params:
        truth = {name: read_grid(params.pop(f"truth_{name}"))
                 for name in ("surface", "bedrock", "friction", "forcing")}
    return build_sia_model(seed, consts=consts, truth=truth, **params)


def _grid_spacing(problem):
    grid = getattr(problem, "grid", None)
    return (grid.dx_km, grid.dy_km) if grid is not None else (1.0, 1.0)


class StageFailure(RuntimeError):
    """A stage could not produce its artifact; ``code`` is the exit status."""

    def __init__(self, stage, message, code=3):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code


class ExperimentRunner:
    """Run configured stages and write their artifacts into ``out_dir``."""

    def __init__(self, cfg, out_dir=None):
        self.cfg = cfg
        self.out_dir = out_dir or cfg.section("output")["dir"]
        os.makedirs(self.out_dir, exist_ok=True)
        self.seeds = _stage_seeds(cfg.seed)
        self._problem = None
        self._map_point = None
        self._eig = None
        self._posterior = None

    # helpers ----------------------------------------------------------
    def header(self, stage):
        return {"config_sha256": self.cfg.sha256, "seed": self.cfg.seed,
                "model": self.cfg.model, "stage": stage}

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def _reusable(self, name):
        path = self.path(name)
        if not os.path.exists(path):
            return False
        head = read_header(path)
        return (head.get("config_sha256") == self.cfg.sha256
                and head.get("seed") == str(self.cfg.seed))

    @property
    def problem(self):
        if self._problem is None:
            self._problem = build_problem(self.cfg, self.seeds["model"])
        return self._problem

    def trust_region_config(self):
        return TrustRegionConfig(**self.cfg.section("map"))

    def ghep_config(self):
        return GhepConfig(**self.cfg.section("ghep"), seed=self.seeds["ghep"])

    # stages -----------------------------------------------------------
    def map_point(self):
        if self._map_point is None:
            if self._reusable("map_point.txt") and self._reusable("map_history.csv"):
                self._map_point = read_grid(self.path("map_point.txt"))[0].ravel()
            else:
                self.run_map()
        return self._map_point

    def run_map(self):
        p = self.problem
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MaxOuterExceeded)
            res = compute_map(p, p.prior_mean_z, self.trust_region_config())
        dx, dy = _grid_spacing(p)
        write_grid(self.path("map_point.txt"), res.map_point.reshape(p.z_grid_shape), dx, dy,
                   self.header("map"))
        write_history_csv(self.path("map_history.csv"), res.history, self.header("map"))
        if not res.converged:
            raise StageFailure("map", f"gradient norm {res.history[-1].grad_norm:.3e} above "
                               f"tolerance after {len(res.history) - 1} iterations")
        self._map_point = res.map_point
        return res

    def eigenpairs(self):
        if self._eig is None:
            lam_min = self.ghep_config().lambda_min
            if self._reusable("eigenpairs.txt"):
                self._eig = EigenPairs.load(self.path("eigenpairs.txt"), lam_min)
            else:
                self.run_lis()
        return self._eig

    def run_lis(self):
        p = self.problem
        z = self.map_point()
        self._eig = solve_ghep(p.misfit_hessian_operator(z), p.prior_cov_z, self.ghep_config())
        head = self.header("lis")
        write_csv(self.path("eigenvalues.csv"), ("index", "lambda"),
                  [(i, float(v)) for i, v in enumerate(self._eig.values)], head)
        self._eig.save(self.path("eigenpairs.txt"), head)
        self.write_manifest()
        return self._eig

    def run_hdsa(self):
        p = self.problem
        rank = self.cfg.section("hdsa")["rank"]
        report = sensitivity_indices(self.eigenpairs(), p, self.map_point(), r=rank,
                                     grad_tol=self.trust_region_config().grad_tol)
        report.to_csv(self.path("sensitivities.csv"), self.header("hdsa"))
        return report

    def posterior(self):
        if self._posterior is None:
            rank = self.cfg.section("laplace")["rank"]
            self._posterior = LaplacePosterior(rank).fit(self.problem, self.map_point(),
                                                         self.eigenpairs())
        return self._posterior

    def run_sample(self):
        p, lp = self.problem, self.posterior()
        rng = np.random.default_rng(self.seeds["sample"])
        dx, dy = _grid_spacing(p)
        head = self.header("sample")
        for k in range(self.cfg.section("laplace")["n_samples"]):
            prior = lp.sample_prior(rng)
            post = lp.sample_posterior(prior)
            write_grid(self.path(f"prior_sample_{k}.txt"), prior.reshape(p.z_grid_shape),
                       dx, dy, head)
            write_grid(self.path(f"posterior_sample_{k}.txt"), post.reshape(p.z_grid_shape),
                       dx, dy, head)
        self.write_manifest()

    def run_variance(self):
        p, lp = self.problem, self.posterior()
        sec = self.cfg.section("laplace")
        prior, post = lp.variances(sec["s_D"], np.random.default_rng(self.seeds["variance"]),
                                   exact=sec["exact_variance"])
        dx, dy = _grid_spacing(p)
        head = self.header("variance")
        write_grid(self.path("prior_variance.txt"), prior.reshape(p.z_grid_shape), dx, dy, head)
        write_grid(self.path("posterior_variance.txt"), post.reshape(p.z_grid_shape), dx, dy,
                   head)
        self.write_manifest()
        return prior, post

    def write_manifest(self):
        eig = self.eigenpairs()
        sec = self.cfg.section("laplace")
        rank = eig.rank if sec["rank"] is None else sec["rank"]
        write_manifest(self.path("manifest.txt"),
                       {"r": rank, "n_eigenpairs": eig.size,
                        "lambda_min": float(self.ghep_config().lambda_min),
                        "s_D": sec["s_D"], "seed": self.cfg.seed}, self.header("manifest"))

    def run_all(self):
        self.run_map()
        self.run_lis()
        self.run_hdsa()
        self.run_sample()
        self.run_variance()

    def run_regression_identity(self):
        sec = self.cfg.section("theorem1")
        rng = np.random.default_rng(self.cfg.seed)
        rows = []
        for k in range(sec["n_instances"]):
            m = int(rng.integers(1, sec["max_m"] + 1))
            n = int(rng.integers(1, sec["max_n"] + 1))
            d = int(rng.integers(1, sec["max_d"] + 1))
            res = regression_identity_check(build_linear_model(m, n, d, int(rng.integers(2 ** 31))))
            rows.append((k, m, n, d, res.max_rel_err, int(res.max_rel_err <= sec["tol"])))
        write_csv(self.path("theorem1_report.csv"),
                  ("instance", "m", "n", "d_dim", "max_rel_err", "passed"), rows,
                  self.header("verify-theorem1"))
        worst = max(r[4] for r in rows)
        if worst > sec["tol"]:
            raise StageFailure("verify-theorem1",
                               f"max relative error {worst:.3e} exceeds {sec['tol']:.1e}", 4)
        return rows

    def run_scalar_scan(self):
        sec = self.cfg.section("example1")
        if sec["n_points"] < 2:
            raise ConfigError("key 'example1.n_points' must be at least 2")
        problem = build_scalar_exp_model(self.seeds["model"], noise_std=sec["noise_std"])
        rows = scalar_sensitivity_scan(
            problem,
            np.linspace(sec["theta1_min"], sec["theta1_max"], sec["n_points"]),
            np.linspace(sec["theta2_min"], sec["theta2_max"], sec["n_points"]),
            self.trust_region_config())
        write_csv(self.path("scalar_sensitivity_scan.csv"), SCAN_COLUMNS, rows,
                  self.header("example1"))
        return rows

    def run(self, stage):
        handler = {
            "map": self.run_map, "lis": self.run_lis, "hdsa": self.run_hdsa,
            "sample": self.run_sample, "variance": self.run_variance, "all": self.run_all,
            "verify-theorem1": self.run_regression_identity, "example1": self.run_scalar_scan,
        }[stage]
        return handler()
