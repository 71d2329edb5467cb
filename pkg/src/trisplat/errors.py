"""Exception hierarchy shared across the package.

Every error raised on a user-facing path derives from :class:`TriSplatError`
so the CLI can map failures to a single machine-parsable line.
"""


class TriSplatError(Exception):
    """Base class for all package errors."""


class DegenerateTriangle(TriSplatError):
    """Triangle area or tangent scale below the configured floor."""


class ZeroLengthEdge(TriSplatError):
    """Edge endpoints coincide."""


class NonFiniteGradient(TriSplatError):
    """NaN or Inf encountered in upstream gradients."""


class EmptyMask(TriSplatError):
    """A supervision mask selects no pixels."""


class ImageTooSmall(TriSplatError):
    """An image is smaller than the operation's minimum window."""


class InsufficientPoints(TriSplatError):
    """Not enough samples for a model fit."""


class DegenerateFit(TriSplatError):
    """Samples do not constrain the model (e.g. all abscissae equal)."""


class EmptyCloud(TriSplatError):
    """A point cloud argument is empty."""


class MissingFile(TriSplatError):
    """An expected scene file is absent; the message names the path."""


class MalformedHeader(TriSplatError):
    """A scene file failed structural validation; the message names the path."""


class DimensionMismatch(TriSplatError):
    """Raster dimensions disagree with their camera or with each other."""


class MissingGroundTruth(TriSplatError):
    """Evaluation requested but the scene carries no ground truth."""


class UnknownKind(TriSplatError):
    """Unrecognised synthetic scene kind."""
