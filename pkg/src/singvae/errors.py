"""Exception types raised across the package."""


class SingVAEError(Exception):
    """Base class for all package errors."""

    kind = "error"


class ConfigError(SingVAEError, ValueError):
    kind = "config"


class ValidationError(SingVAEError, ValueError):
    kind = "validation"


class ParseError(SingVAEError, ValueError):
    """Malformed manifest or score record.

    The message always names the offending line number when one is known.
    """

    kind = "parse"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FingerprintError(SingVAEError):
    kind = "fingerprint"


class CheckpointError(SingVAEError):
    kind = "checkpoint"


class NonFiniteLossError(SingVAEError, FloatingPointError):
    """A loss term became NaN or infinite during training."""

    kind = "nonfinite"

    def __init__(self, term: str, step: int, value: float):
        self.term = term
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss term '{term}' ({value}) at step {step}")


class NoDataError(SingVAEError, ValueError):
    kind = "nodata"
