"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input is outside an operation's numeric domain."""


class ConfigError(ValueError):
    """Invalid configuration value or key."""


class TapeError(RuntimeError):
    """Misuse of a computation tape (e.g. backward called twice)."""


class MissingArtifactError(FileNotFoundError):
    """A required checkpoint or artifact file does not exist."""


class DivergenceError(RuntimeError):
    """Training loss diverged; carries a diagnostic message."""


class NonFiniteLossError(RuntimeError):
    """A loss became non-finite; carries context about where."""
