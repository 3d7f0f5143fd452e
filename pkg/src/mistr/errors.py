"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation failures exit 2,
degenerate-estimation failures exit 3, I/O failures exit 4.
"""


class MistrError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(MistrError, ValueError):
    """Malformed inputs: bad shapes, non-binary flags, inconsistent config."""


class EstimationError(MistrError, RuntimeError):
    """An estimator could not produce a result from otherwise valid inputs."""


class NoOverlapError(EstimationError):
    """All units share one treatment arm; propensities are unidentified."""


class NoTreatmentVariationError(EstimationError):
    """The weighted score has a vanishing denominator at the query point."""


class WeakInstrumentError(EstimationError):
    """The instrument moves treatment too little in the query neighborhood."""


class DegenerateConditioningError(EstimationError):
    """Conditioning a survival curve at a point where it is already zero."""


class VarianceUnavailableError(EstimationError):
    """A variance was requested from a model that cannot supply one."""
