"""Exception types raised across the reconstruction pipeline."""


class ReconstructionError(Exception):
    """Base class for every error raised by pmsplat."""


class DimensionMismatch(ReconstructionError, ValueError):
    pass


class TooSmall(ReconstructionError, ValueError):
    pass


class EmptySet(ReconstructionError, ValueError):
    pass


class InsufficientOverlap(ReconstructionError):
    """Fewer cross-view correspondences than the scale fit needs."""


class DegenerateGeometry(ReconstructionError):
    """The scale least-squares system is rank deficient."""


class NonFiniteResidual(ReconstructionError):
    pass


class EmptyGeometry(ReconstructionError):
    """No primitive lands inside the target frustum."""


class SingularCovariance(ReconstructionError):
    pass
