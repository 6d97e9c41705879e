"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's input contract."""


class DegenerateGeometryError(ValueError):
    """Geometry has no usable extent (zero-size bounds, zero-area faces)."""


class ContractViolationError(RuntimeError):
    """A caller passed data that breaks a documented precondition."""


class ParseError(ValueError):
    """A file or text payload could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """Unknown configuration key or unparseable value."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or does not match the configuration."""


class ResourceLimitError(RuntimeError):
    """An input exceeds a hard size cap."""
