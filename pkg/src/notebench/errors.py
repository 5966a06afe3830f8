"""Exception hierarchy shared across the workbench.

The CLI maps these onto process exit codes: ConfigError -> 2,
InfeasibleError -> 3, VerificationError -> 4.
"""


class NotebenchError(Exception):
    """Base class for all workbench errors."""


class ConfigError(NotebenchError):
    """A configuration value is invalid; the message names the field."""


class InfeasibleError(NotebenchError):
    """A request cannot be satisfied by the available data (e.g. not
    enough negative patients to reach a target ratio)."""


class VerificationError(NotebenchError):
    """Two runs that must be identical produced different bytes."""


class CorpusParseError(NotebenchError):
    """A corpus file record could not be parsed; carries the line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UndefinedAgeError(NotebenchError):
    """Patient age is undefined because the patient has no dated note."""


class DimensionError(NotebenchError):
    """Tensor shapes are incompatible for the named operation."""


class StaleGraphError(NotebenchError):
    """backward() was called twice on the same recorded graph."""


class TrainingError(NotebenchError):
    """Training diverged (NaN loss); carries the failing step index."""


class MetricUndefinedError(NotebenchError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""


class CheckpointMismatchError(NotebenchError):
    """An adapter checkpoint refers to a different backbone than the one loaded."""
