"""
Exception hierarchy for the perching lab.

Library modules raise these; only app.py turns them into exit codes.
"""

from typing import Optional


class PerchError(Exception):
    """Base class for every error raised by the perching lab"""

    exit_code = 1


class ConfigError(PerchError):
    """Invalid experiment configuration, reported with the offending field path"""

    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class GeometryError(PerchError):
    """Robot geometry violates its invariants"""


class NoCollisionCourse(PerchError):
    """Approach trajectory never reaches the landing plane"""


class NumericalDivergence(PerchError):
    """Simulation state became NaN or infinite"""

    exit_code = 3


class SwingWithoutContact(PerchError):
    """Body-swing step requested without a pinned footpad"""


class PolicyError(PerchError):
    """Network shape mismatch or missing forward cache"""


class CheckpointError(PerchError):
    """Checkpoint file is corrupted or incompatible"""


class TrainingDivergence(PerchError):
    """SAC losses or running reward became NaN"""

    exit_code = 3

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (dump: {dump_path})")


class GridMismatch(PerchError):
    """Two success maps do not share grids or criteria"""
