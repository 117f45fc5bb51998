"""
Exception hierarchy for the lab. Every error carries the CLI exit code it maps to.
"""


class LabError(Exception):
    """Base class for all lab errors."""
    exit_code = 3


class UsageError(LabError):
    exit_code = 1


class DataError(LabError):
    """Bad input data: unreadable files, invariant violations, missing artifacts."""
    exit_code = 2


class TraceParseError(DataError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class DistributionError(DataError):
    pass


class TrajectoryGenerationError(DataError):
    def __init__(self, task_label: str, message: str):
        self.task_label = task_label
        super().__init__(f"trajectory generation failed for task {task_label}: {message}")


class CheckpointError(DataError):
    pass


class PlotError(DataError):
    pass


class RuntimeFailure(LabError):
    exit_code = 3


class GradientError(RuntimeFailure):
    """Non-finite values in a forward pass or gradient."""


class ParamFileError(RuntimeFailure):
    pass
