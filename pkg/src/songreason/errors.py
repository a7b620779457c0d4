"""Exception hierarchy shared by every module."""


class SongReasonError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(SongReasonError, ValueError):
    pass


# audio
class DecodeError(SongReasonError):
    pass


class UnsupportedFormat(SongReasonError):
    pass


class InsufficientAudio(SongReasonError):
    pass


class NoPeriodicity(SongReasonError):
    pass


class NoTonalContent(SongReasonError):
    pass


# records
class ParseError(SongReasonError):
    pass


class EmptyRecord(SongReasonError):
    pass


class ValidationError(SongReasonError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


# provider
class ProviderUnavailable(SongReasonError):
    pass


class MalformedVerdict(SongReasonError):
    pass


class TemplateError(SongReasonError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


class TransientProviderError(SongReasonError):
    """Raised by transports for failures worth retrying."""


# pipeline
class RewriteInconsistent(SongReasonError):
    pass


class PipelineHalted(SongReasonError):
    """A stage stopped early; its checkpoint allows the job to resume."""

    def __init__(self, stage, done, cause):
        super().__init__(f"stage {stage!r} halted after {done} items: {cause}")
        self.stage = stage
        self.done = done
        self.cause = cause


# rewards
class ExtractionError(SongReasonError):
    pass


# grpo / policy
class InvalidGroup(SongReasonError, ValueError):
    pass


class NumericalError(SongReasonError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InvalidDimension(SongReasonError, ValueError):
    pass


class VocabularyError(SongReasonError, IndexError):
    pass
