"""Exception hierarchy shared by all subnet modules."""


class SubnetError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(SubnetError, ValueError):
    """Caller passed inconsistent shapes, indices or options."""


class NumericFaultError(SubnetError, ArithmeticError):
    """A computation produced non-finite values.

    ``context`` carries whatever location information the failing layer
    had (sub-step index, rollout step, subsection start index, ...).
    """

    def __init__(self, message: str, **context):
        if context:
            message = f"{message} ({', '.join(f'{k}={v}' for k, v in context.items())})"
        super().__init__(message)
        self.context = context


class DegenerateDataError(SubnetError, ValueError):
    """Data violates a statistical precondition (zero variance, zero RMS)."""


class ParseError(SubnetError, ValueError):
    """A file could not be parsed; message includes row/column location."""


class GenerationError(SubnetError, RuntimeError):
    """Synthetic data generation produced an unusable trajectory."""


class ObservabilityError(SubnetError, ValueError):
    """State reconstruction requested with too few outputs (z*n_y < n_x)."""


class NoSolutionError(SubnetError, RuntimeError):
    """An iterative solver failed to converge from every starting point."""


class ConfigError(SubnetError, ValueError):
    """A run configuration file is malformed or references missing paths."""
