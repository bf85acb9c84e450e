"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (shape, range, missing field)."""


class SamplingError(ValueError):
    """A batch cannot be drawn with the requested P x A layout."""


class UncalibratedPredictorError(RuntimeError):
    """Quality predictor used in eval mode before any running statistics exist."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
