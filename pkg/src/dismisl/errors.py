"""Exception hierarchy shared by every dismisl module."""


class DismislError(Exception):
    """Base class for all library errors."""


class ValidationError(DismislError, ValueError):
    """Input violates a documented precondition."""


class FormatError(ValidationError):
    """A bag, manifest or checkpoint file is malformed."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(ValidationError):
    pass


class InsufficientInstancesError(ValidationError):
    """A bag holds fewer tiles than a pooling strategy needs."""


class DegenerateBatchError(ValidationError):
    """A batch without any observed event has a constant Cox loss."""


class UndefinedMetricError(ValidationError):
    pass


class ConfigError(DismislError):
    pass


class DataError(DismislError):
    pass


class OptimizationError(DismislError):
    pass
