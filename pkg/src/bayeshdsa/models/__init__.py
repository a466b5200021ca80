"""Inverse problems: scalar toy, linear-Gaussian and shallow-ice bedrock inversion."""

from .base import BayesianInverseProblem
from .linear import LinearGaussianProblem, build_linear_model
from .scalar import ScalarExpProblem, build_scalar_exp_model
from .sia import (
    BiLaplacianPrior,
    ShallowIceProblem,
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

__all__ = [
    "BayesianInverseProblem",
    "BiLaplacianPrior",
    "LinearGaussianProblem",
    "ScalarExpProblem",
    "ShallowIceProblem",
    "SiaConstants",
    "SiaFields",
    "SiaGrid",
    "SiaState",
    "build_linear_model",
    "build_scalar_exp_model",
    "build_sia_model",
    "hat_basis",
    "jacobi_smooth",
    "perturbed_fields",
    "sia_forward",
    "sia_step",
    "sia_velocity",
]
