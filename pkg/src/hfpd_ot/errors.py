"""Exception hierarchy shared by all modules."""


class HfpdError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HfpdError, ValueError):
    """Array shapes or lengths are incompatible."""


class DomainError(HfpdError, ValueError):
    """Input lies outside the domain of the operation (e.g. a boundary plan)."""


class ParameterError(HfpdError, ValueError):
    """A scalar parameter is out of range or a required input is empty."""


class CapacityError(HfpdError, ValueError):
    """Problem size exceeds what the routine supports."""


class DegeneracyError(HfpdError, ArithmeticError):
    """A kernel row or column vanished, so scaling cannot proceed."""


class DefinitenessError(HfpdError, ArithmeticError):
    """A matrix that must be positive definite is not."""


class ConditioningError(HfpdError, ArithmeticError):
    """A conditional distribution is undefined (zero conditioning mass)."""


class ConvergenceError(HfpdError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message, *, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class SamplerHealthError(HfpdError, RuntimeError):
    """The HMC sampler diverged too often to be trusted."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class RadiusTooSmallError(HfpdError, RuntimeError):
    """Rejection sampling of marginals accepted (almost) nothing."""


class ValidationError(HfpdError, ValueError):
    """Experiment configuration failed validation."""
