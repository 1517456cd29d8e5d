"""Exception taxonomy for the marl pipeline.

Every failure the pipeline can produce on purpose derives from MarlError so the
CLI can turn it into a machine-readable error record and a nonzero exit.
"""


class MarlError(Exception):
    """Base class for all expected pipeline failures."""


class ConfigError(MarlError):
    """Bad run configuration: unknown key, wrong type, inconsistent values."""


class ValidationError(MarlError):
    """A record violates its own invariants (bad polygon, negative height, ...)."""


class DatasetIOError(MarlError):
    """A dataset file is missing or unreadable."""


class DimensionError(MarlError):
    """Array shapes do not line up for the requested operation."""


class InvalidBoundsError(MarlError):
    """Height encoding bounds with h_max <= h_min."""


class OutOfCanvasError(MarlError):
    """A footprint does not fit the raster canvas; names the record."""


class StateError(MarlError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class TrainingDivergedError(MarlError):
    """Non-finite loss or gradient during optimization; carries the epoch."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class LabelError(MarlError):
    """Class label outside the valid range for a task head."""


class ParameterError(MarlError):
    """Invalid algorithm parameter (k > n points, empty elbow range, ...)."""


class DegenerateBuildingError(MarlError):
    """Building geometry unusable for shape metrics (zero height or area)."""


class MetricUndefinedError(MarlError):
    """Accuracy requested against a non-positive ground truth."""


class ProviderError(MarlError):
    """An EUI source has no value for a requested archetype."""


class InputError(MarlError):
    """Invalid value passed to an aggregation (negative area, length mismatch)."""


class StageDependencyError(MarlError):
    """A pipeline stage is missing an artifact a previous stage should have made."""


class LockError(MarlError):
    """Another stage currently holds the output-directory lock."""
