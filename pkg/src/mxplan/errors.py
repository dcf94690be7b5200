"""Exception types. Each carries the CLI exit code it maps to."""


class MxPlanError(Exception):
    exit_code = 1


class InfeasibleError(MxPlanError):
    """The memory budget cannot be met by any assignment."""

    exit_code = 2

    def __init__(self, message: str, min_memory_bytes: float | None = None):
        super().__init__(message)
        self.min_memory_bytes = min_memory_bytes


class ConfigError(MxPlanError, ValueError):
    exit_code = 3


class DataError(MxPlanError, ValueError):
    exit_code = 4
