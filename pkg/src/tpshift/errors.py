"""Exception types shared across the package."""


class TpshiftError(Exception):
    """Base class for all package errors."""


class ConfigError(TpshiftError):
    """Invalid or mutually inconsistent configuration values."""


class TraceParseError(ConfigError):
    """Malformed trace or table file.

    Carries the 1-based line number of the offending row when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ScenarioError(TpshiftError):
    """Scenario fails validation or admission checks."""


class ProfileLookupError(TpshiftError, KeyError):
    """Requested parallel config is absent from the profile table."""

    def __str__(self) -> str:  # KeyError quotes its payload otherwise
        return Exception.__str__(self)


class PlanVerificationError(TpshiftError):
    """A reshard plan failed its safety checks."""
