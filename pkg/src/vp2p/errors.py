"""Exception types shared across the package."""

from __future__ import annotations


class VP2PError(Exception):
    """Base class for all library errors."""


class DimensionError(VP2PError, ValueError):
    pass


class InsufficientDataError(VP2PError):
    """Too few correspondences (or inliers) for the requested solver."""


class DegenerateConfigurationError(VP2PError):
    pass


class EmptySetError(VP2PError):
    """An operation received (or would produce) an empty sample set."""


class NoConsensusError(VP2PError):
    pass


class NonConvergenceError(VP2PError):
    """Gauss-Newton gave up; ``best_pose`` holds the lowest-cost iterate."""

    def __init__(self, message: str, best_pose=None, best_cost: float = float("nan")):
        super().__init__(message)
        self.best_pose = best_pose
        self.best_cost = best_cost


class SamplerDegenerateError(VP2PError):
    pass


class ParseError(VP2PError):
    """An input file could not be parsed."""
