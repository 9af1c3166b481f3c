"""Exception types shared across the package."""


class AgrpError(Exception):
    """Base class for all package errors."""


class DimensionError(AgrpError, ValueError):
    """An array has the wrong shape along a named axis."""


class DomainError(AgrpError, ValueError):
    """A scalar argument lies outside its admissible range."""


class ConfigurationError(AgrpError, ValueError):
    pass


class EvaluationError(AgrpError, ArithmeticError):
    """A forward computation produced a non-finite value."""


class DivergenceError(EvaluationError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, instance=None):
        super().__init__(message)
        self.epoch = epoch
        self.instance = instance


class GenerationError(AgrpError, RuntimeError):
    pass


class FormatError(AgrpError, ValueError):
    """A binary file carries an unexpected magic number or version."""


class ConsistencyError(AgrpError, ValueError):
    pass


class StateError(AgrpError, RuntimeError):
    """Cached forward state does not belong to the arguments it is used with."""


class CapabilityError(AgrpError, RuntimeError):
    """The model was not trained with the component an operation needs."""


class TruncatedFileError(AgrpError, OSError):
    """A binary file ended before its header or payload was complete."""
