"""Exception types raised across the benchmark."""


class PrivBenchError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PrivBenchError, ValueError):
    pass


class DataError(PrivBenchError, ValueError):
    pass


class VocabularyError(PrivBenchError, ValueError):
    pass


class SequenceLengthError(PrivBenchError, ValueError):
    pass


class ShapeError(PrivBenchError, ValueError):
    pass


class DomainError(PrivBenchError, ValueError):
    pass


class TrainingError(PrivBenchError, RuntimeError):
    """Raised on a non-finite per-example gradient; carries the sample id."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class CalibrationError(PrivBenchError, RuntimeError):
    pass


class IncompleteScoringError(PrivBenchError, ValueError):
    pass


class FitError(PrivBenchError, ValueError):
    pass


class MetricError(PrivBenchError, ValueError):
    pass


class IntegrityError(PrivBenchError, RuntimeError):
    pass


class StageError(PrivBenchError, RuntimeError):
    """Pipeline stage failure; `stage` names the stage that aborted."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
