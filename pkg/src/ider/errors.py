"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(ValueError):
    """Tensor or vector dimensions do not match what the model expects."""


class SequencingError(RuntimeError):
    """Trainer operations were called out of order."""


class UndefinedMetricError(ValueError):
    """A metric was requested where it is not defined."""


class TermDisabled(RuntimeError):
    """A loss term cannot be computed yet (e.g. no checkpoint on the first task)."""


class ComparisonError(ValueError):
    """Two result bundles cannot be compared."""
