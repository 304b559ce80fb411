from __future__ import annotations

from pathlib import Path


class LanePerfError(Exception):
    """Base class for every error raised by laneperf."""


class DataError(LanePerfError, ValueError):
    """Input data (manifest, records, images) is malformed or inconsistent."""


class ManifestError(DataError):
    pass


class RecordError(DataError):
    def __init__(self, message: str, path: Path | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class DimensionError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class MissingGroundTruthError(DataError):
    pass


class DegenerateLaneError(DataError):
    pass


class CalibrationError(LanePerfError):
    """A calibration method's preconditions are not met."""


class ArtifactError(LanePerfError):
    """Wrong artifact type, unsupported version or manifest fingerprint mismatch."""


class NumericalError(LanePerfError, ArithmeticError):
    pass
