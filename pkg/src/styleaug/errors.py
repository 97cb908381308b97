"""Exception types; the CLI maps each to an exit code."""


class ConfigError(Exception):
    """Missing or inconsistent configuration (exit code 1)."""


class DataError(Exception):
    """A dataset cannot be assembled from what is on disk (exit code 2)."""


class AnnotationParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingDivergedError(RuntimeError):
    """Non-finite training loss (exit code 3)."""

    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch
