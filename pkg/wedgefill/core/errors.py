from typing import Optional


class WedgefillError(Exception):
    """Base error carrying the CLI exit code and a human-readable detail"""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class ConfigError(WedgefillError):
    """Invalid or unknown configuration"""

    exit_code = 2


class InvalidInputError(WedgefillError, ValueError):
    """Array shape, geometry or range violation"""

    exit_code = 2


class TensorFormatError(WedgefillError):
    """Malformed TensorContainer or raw slice file"""

    exit_code = 2


class MissingArtifactError(WedgefillError):
    """A prerequisite artifact is not present in the run directory"""

    exit_code = 3

    def __init__(self, path: str, produced_by: Optional[str] = None):
        detail = f"Missing artifact: {path}"
        if produced_by:
            detail += f" (run stage '{produced_by}' first)"
        super().__init__(detail)
        self.path = path
        self.produced_by = produced_by


class TrainingDivergedError(WedgefillError):
    """Non-finite loss or gradient during training"""

    exit_code = 4
