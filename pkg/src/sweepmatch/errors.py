"""Exception hierarchy shared by every sweepmatch module."""


class SweepMatchError(Exception):
    """Base class for all pipeline errors."""


class InputError(SweepMatchError, ValueError):
    """Raised for malformed or inconsistent inputs."""


class FormatError(SweepMatchError):
    """Raised when a file cannot be decoded."""


# geometry
class DegenerateProjection(SweepMatchError):
    pass


class RayParallelToPlane(SweepMatchError):
    pass


class InsufficientCorrespondences(InputError):
    pass


class DegenerateConfiguration(SweepMatchError):
    pass


class NoConsensus(SweepMatchError):
    pass


class CoincidentCenters(InputError):
    pass


class SizeMismatch(InputError):
    pass


class SingularTransform(SweepMatchError):
    pass


# features
class EmptyInput(InputError):
    pass


class ZeroVariance(SweepMatchError):
    pass


class PatchLargerThanImage(InputError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class DimensionOverflow(FormatError):
    pass


# simlearn
class NoValidSamples(SweepMatchError):
    pass


class ZeroVector(SweepMatchError):
    pass


class DimensionMismatch(InputError):
    pass


class DivergenceDetected(SweepMatchError):
    pass


# planesweep / regularize
class BadRange(InputError):
    pass


class EmptyViewList(InputError):
    pass


class MixedRangeTags(InputError):
    pass


class TooFewHypotheses(InputError):
    pass


class EmptyScene(InputError):
    pass


# groundtruth
class NoVisiblePoints(SweepMatchError):
    pass


class TooFewSamples(SweepMatchError):
    pass


class CollinearInput(SweepMatchError):
    pass


# eval / fusion
class ShapeMismatch(InputError):
    pass


class NoOverlap(SweepMatchError):
    pass


class FrameMismatch(InputError):
    pass


class EmptyList(InputError):
    pass


# synth
class RayMissesTerrain(SweepMatchError):
    pass
