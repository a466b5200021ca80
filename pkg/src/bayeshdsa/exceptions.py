"""Exception and warning classes shared across the package."""


class BayesHDSAError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(BayesHDSAError, ValueError):
    """An input vector or operator has the wrong size."""


class MaxIterExceeded(BayesHDSAError, RuntimeError):
    """An iterative solver hit its iteration cap before converging."""


class NonPositiveCurvature(BayesHDSAError, ArithmeticError):
    """CG met a direction with p^T A p <= 0, so the operator is not SPD."""


class BreakdownError(BayesHDSAError, ArithmeticError):
    """Lanczos produced a vanishing off-diagonal before the requested steps."""


class ForwardSolveFailure(BayesHDSAError, RuntimeError):
    """The forward model could not be evaluated (e.g. a PDE solve diverged)."""


class TimeStepDiverged(ForwardSolveFailure):
    """A shallow-ice time step produced non-finite or strongly negative thickness."""


class NotAtStationaryPoint(BayesHDSAError, ValueError):
    """The supplied MAP point does not satisfy the first-order condition."""


class NotLinearModel(BayesHDSAError, TypeError):
    """A dense linear-Gaussian oracle was requested for a nonlinear model."""


class ConfigError(BayesHDSAError, ValueError):
    """An experiment configuration is malformed."""


class MaxOuterExceeded(RuntimeWarning):
    """The trust-region solver returned its best iterate without converging."""


class RankExhausted(RuntimeWarning):
    """The eigensolver reached the full dimension before the threshold."""


class NegativeVarianceWarning(RuntimeWarning):
    """Estimated variances dipped below zero and were clamped."""
