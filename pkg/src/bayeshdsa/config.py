"""INI experiment configuration with a fixed schema.

Example::

    [run]
    seed = 1
    model = sia

    [model]
    nx = 21
    ny = 21

    [ghep]
    lambda_min = 0.1

Unknown sections or keys are rejected, so a misspelled tolerance never
silently falls back to its default.
"""

import configparser
import hashlib
import os
from dataclasses import dataclass, field

from .exceptions import ConfigError

MODEL_KINDS = ("scalar_exp", "linear", "sia")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_bool(text):
    return None if text.strip().lower() in ("", "none") else _bool(text)


_MODEL_KEYS = {
    "scalar_exp": {"noise_std": float, "n_data": int, "theta1": float, "theta2": float},
    "linear": {"m": int, "n": int, "d_dim": int, "noise_level": float, "coupling": float},
    "sia": {
        "nx": int, "ny": int, "dx_km": float, "dy_km": float, "T_years": float, "nt": int,
        "aux_nx": int, "aux_ny": int, "obs_every": int, "noise_rel": float, "refine": int,
        "smoothing_sweeps": int, "rho": float, "g": float, "flow_rate_A": float,
        "perturbation_scale": float, "prior_beta": float, "prior_alpha": float,
        "sqrt_steps": int, "truth_surface": str, "truth_bedrock": str,
        "truth_friction": str, "truth_forcing": str,
    },
}

SCHEMA = {
    "run": {"seed": int, "model": str},
    "map": {"grad_tol": float, "max_outer": int, "initial_radius": _opt_float,
            "max_radius": float, "eta_accept": float, "cg_rel_tol": float,
            "cg_max_iter": _opt_int, "gauss_newton": _opt_bool},
    "ghep": {"r0": int, "delta_r": int, "oversampling": int, "lambda_min": float},
    "hdsa": {"rank": _opt_int},
    "laplace": {"rank": _opt_int, "n_samples": int, "s_D": int, "exact_variance": _bool},
    "example1": {"theta1_min": float, "theta1_max": float, "theta2_min": float,
                 "theta2_max": float, "n_points": int, "noise_std": float},
    "theorem1": {"n_instances": int, "max_m": int, "max_n": int, "max_d": int, "tol": float},
    "output": {"dir": str},
}

DEFAULTS = {
    "map": {},
    "ghep": {},
    "hdsa": {"rank": None},
    "laplace": {"rank": None, "n_samples": 3, "s_D": 300, "exact_variance": False},
    "example1": {"theta1_min": 2.0, "theta1_max": 8.0, "theta2_min": 0.4, "theta2_max": 1.6,
                 "n_points": 25, "noise_std": 1.0},
    "theorem1": {"n_instances": 50, "max_m": 20, "max_n": 10, "max_d": 15, "tol": 1e-9},
    "output": {"dir": "results"},
}


@dataclass
class ExperimentConfig:
    """Parsed configuration; section dictionaries hold only keys set in the file
    (plus the defaults of ``DEFAULTS``)."""

    seed: int
    model: str
    model_params: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)
    sha256: str = ""
    base_dir: str = "."

    def section(self, name):
        return dict(self.sections.get(name, {}))


def parse_config(text, base_dir=".", seed=None):
    """Parse INI ``text``; ``seed`` overrides ``[run] seed``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    if parser.defaults():
        raise ConfigError(f"unknown key 'DEFAULT.{next(iter(parser.defaults()))}'")
    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    run = raw.get("run", {})
    model = run.get("model", "").strip()
    if model not in MODEL_KINDS:
        raise ConfigError(f"key 'run.model' must be one of {', '.join(MODEL_KINDS)}")
    schema = dict(SCHEMA, model=_MODEL_KEYS[model])
    parsed = {}
    for sec, items in raw.items():
        if sec not in schema:
            raise ConfigError(f"unknown section '{sec}'")
        parsed[sec] = {}
        for key, value in items.items():
            conv = schema[sec].get(key)
            if conv is None:
                raise ConfigError(f"unknown key '{sec}.{key}'")
            try:
                parsed[sec][key] = conv(value) if conv is not str else value.strip()
            except ValueError as exc:
                raise ConfigError(f"key '{sec}.{key}': {exc}") from exc
    if seed is None:
        if "seed" not in parsed.get("run", {}):
            raise ConfigError("key 'run.seed' is required")
        seed = parsed["run"]["seed"]
    sections = {name: {**DEFAULTS.get(name, {}), **parsed.get(name, {})}
                for name in SCHEMA if name not in ("run",)}
    model_params = parsed.get("model", {})
    for key, value in model_params.items():
        if key.startswith("truth_"):
            path = value if os.path.isabs(value) else os.path.join(base_dir, value)
            if not os.path.exists(path):
                raise ConfigError(f"key 'model.{key}': file {path} does not exist")
            model_params[key] = path
    if model == "sia" and 0 < sum(k.startswith("truth_") for k in model_params) < 4:
        raise ConfigError("key 'model.truth_*': give all four truth fields or none")
    digest = hashlib.sha256(text.encode()).hexdigest()
    return ExperimentConfig(int(seed), model, model_params, sections, digest, base_dir)


def load_config(path, seed=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return parse_config(text, os.path.dirname(os.path.abspath(path)), seed)
