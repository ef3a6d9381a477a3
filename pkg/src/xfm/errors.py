"""Exception types shared across the package."""


class XfmError(Exception):
    """Base class for all library errors."""


class DimensionError(XfmError):
    """Operands have incompatible shapes."""


class ParseError(XfmError):
    """Malformed dataset row or header; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(XfmError):
    """Invalid configuration file or option value."""


class DataError(XfmError):
    """Dataset-level contract violation (bad split ratios, empty input)."""


class CheckpointError(XfmError):
    """Unreadable, truncated, or wrong-magic checkpoint file."""


class MetricError(XfmError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class TrainingError(XfmError):
    """Training diverged or could not proceed."""


class CapacityError(XfmError):
    """Exhaustive expansion would exceed the configured size guard."""


class EvaluationError(XfmError):
    """A probed function returned a non-finite value."""
