"""Exception types shared across the package."""


class SfaLabError(Exception):
    pass


class DimensionError(SfaLabError, ValueError):
    """Operands have incompatible lengths or shapes."""


class NumericError(SfaLabError, ArithmeticError):
    """A computation produced NaN or Inf."""


class DomainError(SfaLabError, ValueError):
    """An argument lies outside the operation's domain."""


class FormatError(SfaLabError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(SfaLabError, ValueError):
    """Bad experiment configuration. ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key
