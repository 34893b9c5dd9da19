"""Exception and warning types shared across the toolkit."""


class FaceForgeError(Exception):
    """Base class for all toolkit errors."""


# --- file ingestion ---------------------------------------------------------

class ParseError(FaceForgeError):
    pass


class EmptyCloud(FaceForgeError):
    pass


# --- geometry ---------------------------------------------------------------

class NotUnit(FaceForgeError):
    pass


class NotRotation(FaceForgeError):
    pass


class SizeMismatch(FaceForgeError):
    pass


# --- bending energy / shape distance ----------------------------------------

class DuplicatePoints(FaceForgeError):
    pass


class SingularSystem(FaceForgeError):
    pass


class IndexMismatch(FaceForgeError):
    pass


class NotEnoughPairs(FaceForgeError):
    pass


# --- synthesis ---------------------------------------------------------------

class MissingExpression(FaceForgeError):
    pass


class PlanExhausted(FaceForgeError):
    pass


# --- view synthesis ----------------------------------------------------------

class InvalidCustomPose(FaceForgeError):
    pass


# --- grid fitting / images ---------------------------------------------------

class NoSamples(FaceForgeError):
    pass


class SolverDiverged(FaceForgeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SizeTooLarge(FaceForgeError):
    pass


# --- evaluation --------------------------------------------------------------

class DimensionMismatch(FaceForgeError):
    pass


class ZeroVector(FaceForgeError):
    pass


class UnknownProbeInClosedWorld(FaceForgeError):
    pass


class NoGenuinePairs(FaceForgeError):
    pass


class InvalidCounts(FaceForgeError):
    pass


class Unachievable(FaceForgeError):
    pass


class EmptyGalleryAfterRemoval(FaceForgeError):
    pass


# --- pipeline ---------------------------------------------------------------

class ConfigError(FaceForgeError):
    pass


class StageFailure(FaceForgeError):
    pass


# --- recoverable conditions reported as warnings -----------------------------

class DegenerateNeighborhood(UserWarning):
    """A normal-estimation neighborhood had rank < 2; +z fallback used."""


class DegenerateHull(UserWarning):
    """Convex hull construction failed; all points marked visible."""


class CropOutOfBounds(UserWarning):
    """Crop window clamped to the grid and zero-padded."""


class EmptyCentralRegion(UserWarning):
    """Nosetip central region was empty; global z-max fallback used."""
