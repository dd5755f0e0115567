"""Exception hierarchy shared by every weakalign_det module."""


class WeakAlignError(Exception):
    """Base class for all errors raised by weakalign_det."""


class ConfigurationError(WeakAlignError):
    """Bad configuration, incompatible shapes or an unusable model."""


class GenerationError(WeakAlignError):
    """A synthetic scene could not be generated with the requested settings."""


class AnnotationError(WeakAlignError):
    """An annotation file violates the paired-annotation schema."""

    def __init__(self, message: str, scene_id: str | None = None, field: str | None = None):
        super().__init__(message)
        self.scene_id = scene_id
        self.field = field


class MetricError(WeakAlignError):
    """A metric is undefined for the given input."""


class DepthInitError(WeakAlignError):
    """No valid depth is available to initialize a 3D box."""


class ShiftTargetError(WeakAlignError):
    """A positive RoI has no shift target."""


class ProbabilityError(WeakAlignError, ValueError):
    """Class probabilities outside [0, 1] or not summing to one."""
