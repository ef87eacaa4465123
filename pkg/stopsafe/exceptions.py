"""
Errors raised by the stop-safety library. Every error is a ``ValueError`` so
callers that only care about bad input can catch the builtin.
"""


class StopSafeError(ValueError):
    """Base class for all library errors."""


# ---------------- Ingest ----------------
class MissingColumnError(StopSafeError):
    pass


class MalformedRowError(StopSafeError):
    pass


class NonMonotonicTimeError(StopSafeError):
    pass


class NonPositiveGlucoseError(StopSafeError):
    pass


class UnknownClassLabelError(StopSafeError):
    pass


class DanglingAnnotationKeyError(StopSafeError):
    pass


class UnknownParticipantError(StopSafeError):
    pass


# ---------------- Geometry / clustering ----------------
class OutOfEnvelopeError(StopSafeError):
    pass


class InvalidParameterError(StopSafeError):
    pass


# ---------------- CGM / fusion / encounters ----------------
class UnorderedInputError(StopSafeError):
    pass


class InvalidWindowError(StopSafeError):
    pass


class ParticipantMismatchError(StopSafeError):
    pass


class EmptyWindowError(StopSafeError):
    pass


# ---------------- Models ----------------
class CompleteSeparationError(StopSafeError):
    def __init__(self, message: str, level: str | None = None):
        super().__init__(message)
        self.level = level


class DegenerateGroupsError(StopSafeError):
    pass


class NotNestedError(StopSafeError):
    pass


class EmptyPartitionError(StopSafeError):
    pass


class RefitFailureError(StopSafeError):
    def __init__(self, message: str, group: str | None = None):
        super().__init__(message)
        self.group = group


# ---------------- Pipeline ----------------
class ConfigError(StopSafeError):
    pass


class StageError(StopSafeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"Stage [{stage}] failed: {cause}")
        self.stage = stage
        self.cause = cause
