"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DiarizationError(Exception):
    """Base class for all package errors."""


# audio / features
class AudioError(DiarizationError):
    pass


class WrongSampleRate(AudioError):
    pass


class WrongChannelCount(AudioError):
    pass


class MalformedFile(AudioError):
    pass


class TooShort(DiarizationError):
    pass


# labels / manifests
class LabelError(DiarizationError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class GapError(LabelError):
    pass


class OverlapError(LabelError):
    pass


class CoverageError(LabelError):
    pass


class EmptyTrack(LabelError):
    pass


class IncompatibleTaxonomies(LabelError):
    pass


class ParseError(DiarizationError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


# tensors / models
class ShapeMismatch(DiarizationError):
    pass


class OddDimension(DiarizationError):
    pass


class NonFiniteValue(DiarizationError):
    pass


class ArchitectureMismatch(DiarizationError):
    pass


class SpanMismatch(DiarizationError):
    pass


# losses
class AllMasked(DiarizationError):
    pass


class NonUnitRows(DiarizationError):
    pass


class MissingAuxHead(DiarizationError):
    pass


# training
class EmptySplit(DiarizationError):
    pass


class NonFiniteGradient(DiarizationError):
    pass


class DivergedLoss(DiarizationError):
    pass


class CheckpointError(DiarizationError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


# metrics
class LengthMismatch(DiarizationError):
    pass


class EmptyEvaluation(DiarizationError):
    pass


class LabelOutOfRange(DiarizationError):
    pass


class ConfigError(DiarizationError):
    pass
