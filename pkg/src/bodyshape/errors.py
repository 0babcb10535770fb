"""Exception types raised across the package."""


class BodyShapeError(Exception):
    pass


class BehindCamera(BodyShapeError):
    """A projected point lies at or behind the near plane (z <= 1 cm)."""


class MissingJoints(BodyShapeError):
    """Required 2D detections are absent or degenerate."""


class EmptyMask(BodyShapeError):
    """A segmentation mask has no usable pixels."""


class TooSmall(BodyShapeError):
    pass


class ShapeMismatch(BodyShapeError):
    pass


class AllCandidatesFailed(BodyShapeError):
    pass


class NoInliers(BodyShapeError):
    pass


class EmptySamples(BodyShapeError):
    pass


class NoData(BodyShapeError):
    pass


class MissingGroup(BodyShapeError):
    pass


class MissingShape(BodyShapeError):
    pass
