"""Exception hierarchy. Each family maps onto one CLI exit code."""


class OwcodError(Exception):
    exit_code = 1


class ConfigError(OwcodError):
    exit_code = 2


class DataError(OwcodError):
    """Bad input data: malformed files, integrity violations, unknown ids."""

    exit_code = 3


class FormatError(DataError):
    """Corrupt or unsupported memory-pool container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(DataError):
    """COCO-format parse failure; ``path`` is a JSON path like ``$.annotations[3].bbox``."""

    def __init__(self, message, path="$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class SequencingError(DataError):
    pass


class NumericalError(OwcodError):
    exit_code = 4


class ShapeError(ValueError, OwcodError):
    pass


class DomainError(ValueError, NumericalError):
    pass


class ContractError(RuntimeError, OwcodError):
    """A caller broke an API precondition (non-scalar loss, missing grads, ...)."""
