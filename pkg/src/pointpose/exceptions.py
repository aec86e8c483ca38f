"""Exception hierarchy shared by every stage of the pipeline."""


class PointPoseError(Exception):
    """Base class for all errors raised by pointpose."""


class InvalidParameter(PointPoseError, ValueError):
    pass


class DimensionMismatch(PointPoseError, ValueError):
    pass


class TooFewPoints(PointPoseError, ValueError):
    pass


class EmptyCloud(PointPoseError, ValueError):
    pass


class EmptyIndex(PointPoseError, ValueError):
    pass


class EmptyFeatureSet(PointPoseError, ValueError):
    pass


class DegenerateConfiguration(PointPoseError, ValueError):
    """Correspondences do not constrain a rigid transform (too few or collinear)."""


class TooFewCorrespondences(PointPoseError):
    """Fewer than three correspondences survived matching/filtering."""


class NoOverlap(PointPoseError):
    """No source point has a target neighbor within the correspondence distance."""


class NoMatch(PointPoseError):
    """No candidate view reached the minimum number of inlier correspondences."""


class SingleClass(PointPoseError, ValueError):
    pass


class EmptyImage(PointPoseError, ValueError):
    pass


class ParseError(PointPoseError, ValueError):
    pass


class UnknownInstance(PointPoseError, KeyError):
    pass


class CompatibilityError(PointPoseError):
    """A model database was built with parameters that differ from the pipeline's."""


class DegenerateBox(PointPoseError, ValueError):
    pass


class EmptyProjection(PointPoseError, ValueError):
    pass


class EmptyCrop(PointPoseError, ValueError):
    pass


class UndefinedRecall(PointPoseError, ValueError):
    pass


class NotFittedError(PointPoseError, AttributeError):
    pass
