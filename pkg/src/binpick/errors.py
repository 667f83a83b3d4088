"""Exception hierarchy shared across the package."""


class BinPickError(Exception):
    """Base class for all package errors."""


class ValidationError(BinPickError, ValueError):
    """Invalid input value or configuration."""


class EmptyCloud(ValidationError):
    pass


class NonPositiveCell(ValidationError):
    pass


class NonPositiveParam(ValidationError):
    pass


class FrameMismatch(ValidationError):
    pass


class PlacementFailure(BinPickError):
    pass


class UnknownInstance(BinPickError, KeyError):
    pass


class NoFeasibleCandidate(BinPickError):
    pass


class EmptyCandidates(BinPickError):
    pass


class GridUnmarked(BinPickError):
    pass


class TooFewPoints(BinPickError):
    pass


class DegenerateModel(BinPickError):
    pass


class NoCorrespondences(BinPickError):
    pass


class NoPreviousSegments(BinPickError):
    pass
