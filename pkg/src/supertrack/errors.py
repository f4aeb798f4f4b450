"""Exception types raised across the tracking pipeline."""


class SupertrackError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(SupertrackError):
    pass


class InvalidDepth(SupertrackError):
    pass


class InsufficientNodes(SupertrackError):
    pass


class DimensionMismatch(SupertrackError):
    pass


class BehindCamera(SupertrackError):
    pass


class CameraInsideCylinder(SupertrackError):
    pass


class DegenerateWeights(SupertrackError):
    """All particle likelihoods vanished; the prior weights should be kept."""


class ZeroNormal(SupertrackError):
    pass


class EmptyFrame(SupertrackError):
    pass


class NoAssociations(SupertrackError):
    pass


class InvalidFeatureDepth(SupertrackError):
    pass


class NonFiniteSystem(SupertrackError):
    pass


class SolverDiverged(SupertrackError):
    pass


class EmptyCluster(SupertrackError):
    pass


class MissingGroundTruth(SupertrackError):
    pass


class DatasetError(SupertrackError):
    """Raised when a dataset directory is missing files or is inconsistent."""


class ConfigError(SupertrackError):
    """Raised when a configuration file cannot be read or holds invalid values."""
