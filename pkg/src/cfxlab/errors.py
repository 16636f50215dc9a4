"""Exception taxonomy shared across the package.

Configuration/validation problems map to CLI exit code 2, runtime and
training failures to exit code 3.
"""


class CfxError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(CfxError):
    """Invalid configuration value, enum combination, or unknown config key."""


class DomainError(CfxError):
    """An argument is outside its mathematical domain (e.g. time out of range)."""


class ShapeError(CfxError):
    """Array shape mismatch. The message names both shapes."""

    def __init__(self, message: str, expected=None, got=None):
        if expected is not None or got is not None:
            message = f"{message}: expected {tuple(expected)}, got {tuple(got)}"
        super().__init__(message)
        self.expected = expected
        self.got = got


class DataFormatError(CfxError):
    """Base class for persisted-file problems."""


class IntegrityError(DataFormatError):
    """Corrupt or truncated file. Carries the byte position where parsing failed."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)
        self.position = position


class FormatVersionError(DataFormatError):
    """Magic string or container version does not match the expected format."""


class TrainingError(CfxError):
    """Training diverged or otherwise failed. Carries the step index."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class NumericError(CfxError):
    """NaN/Inf encountered during computation. Names the producing term or step."""

    def __init__(self, message: str, step: int | None = None, term: str | None = None):
        parts = [message]
        if term is not None:
            parts.append(f"term={term}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(" ".join(parts))
        self.step = step
        self.term = term


class ValidationError(CfxError):
    """Inconsistent inputs to an aggregation (e.g. mixed run configs)."""
