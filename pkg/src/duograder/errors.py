"""Exception types shared across the package."""


class DuograderError(Exception):
    """Base class for all package-specific failures."""


class ConfigurationError(DuograderError):
    """A config value or combination of settings is unusable."""


class IngestionError(DuograderError):
    """A corpus file cannot be read at all (bad header, bad encoding)."""


class ValidationFailure(DuograderError):
    """A record or score vector violates the rubric. Retryable for model output."""


class ParseFailure(DuograderError):
    """Model output contained no parsable scores. Carries the raw text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class GatewayUnavailable(DuograderError):
    """Upstream endpoint unreachable after exhausting retries."""


class RequestRejected(DuograderError):
    """Upstream returned a 4xx; the request itself is bad and is not retried."""


class GatewayProtocolError(DuograderError):
    """Upstream response violated the expected wire format."""


class SlowGradingFailure(DuograderError):
    """Every slow-grading trial failed to produce usable scores."""


class TrainingDiverged(DuograderError):
    """Loss became non-finite during classifier training."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class FormatVersionError(DuograderError):
    """A model/log/snapshot file was written by an incompatible format version."""


class IntegrityError(DuograderError):
    """A model/log/snapshot file is truncated or fails its checksum."""


class GradingFailure(DuograderError):
    """An essay could not be graded and no fallback route was permitted."""
