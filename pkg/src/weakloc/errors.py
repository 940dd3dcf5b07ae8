"""Exception types shared across the package."""


class WeaklocError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(WeaklocError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ConfigError(WeaklocError, ValueError):
    """Invalid configuration value (pooling sharpness, ratios, counts, ...)."""


class LabelError(WeaklocError, ValueError):
    """Malformed labels: non-one-hot targets, unknown or empty classes."""


class UsageError(WeaklocError, RuntimeError):
    """An API was called outside its contract (non-scalar loss, empty input)."""


class DegenerateTransformError(WeaklocError, ValueError):
    """Affine warp with a singular 2x2 block; the sampling grid collapses."""


class EvaluationError(WeaklocError, RuntimeError):
    """A numeric probe (finite differences) hit a non-finite value."""


class NumericsError(WeaklocError, RuntimeError):
    """Training produced a non-finite loss; the run is aborted."""


class ArtifactError(WeaklocError, RuntimeError):
    """A file on disk (tensor, checkpoint, manifest) is missing or malformed."""
