"""Exception types raised by clusteriv."""


class ClusterIVError(ValueError):
    """Base class for all library errors."""


class RankDeficientControls(ClusterIVError):
    pass


class NonSymmetricInput(ClusterIVError):
    pass


class CrossClusterEdge(ClusterIVError):
    pass


class InvalidExclusion(ClusterIVError):
    pass


class OracleTooLarge(ClusterIVError):
    pass


class DegenerateDenominator(ClusterIVError):
    pass


class NonpositiveQ(ClusterIVError):
    pass


class InvalidSpec(ClusterIVError):
    pass


class InvalidGamma(ClusterIVError):
    pass


class MissingColumn(ClusterIVError):
    pass


class NonFiniteValue(ClusterIVError):
    pass


class MonteCarloAborted(ClusterIVError):
    """Too many replications failed."""
