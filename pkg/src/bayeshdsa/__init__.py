"""Hyper-differential sensitivity analysis for Bayesian inverse problems."""

__version__ = "0.1.0"
