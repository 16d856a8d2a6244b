"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value is outside its documented domain."""


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class ContractError(RuntimeError):
    """An internal invariant that callers rely on does not hold."""


class MetricError(ValueError):
    """A ranking metric is undefined for the given label set."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
