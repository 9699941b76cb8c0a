"""Exception types raised across the package."""


class ValidationError(ValueError):
    """An argument or record violates its documented contract."""


class UnsupportedCorruptionError(ValidationError):
    """The requested corruption kind is not in the catalogue."""


class ConfigurationError(ValueError):
    """A partition or run configuration cannot be realized."""


class ContractViolationError(RuntimeError):
    """A loss was called on an example with the wrong cleanliness gate."""


class ImmutabilityError(RuntimeError):
    """Attempt to modify or backpropagate into a frozen parameter section."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
