"""Exception types raised across the package."""


class MetricOODError(Exception):
    """Base class; ``kind`` is used for machine-parsable CLI errors."""

    kind = "error"


class ConfigurationError(MetricOODError, ValueError):
    kind = "config"


class UsageError(MetricOODError, ValueError):
    kind = "usage"


class FormatError(MetricOODError, ValueError):
    kind = "format"


class TrainingDivergedError(MetricOODError, RuntimeError):
    kind = "diverged"

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class PairingWarning(UserWarning):
    """Emitted when a minibatch cannot produce any valid pair."""
