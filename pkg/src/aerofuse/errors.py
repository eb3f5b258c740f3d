"""Exception types shared across the pipeline.

Grouped by the stage that raises them.  Everything derives from
:class:`AerofuseError` so callers can catch pipeline failures wholesale;
per-cluster processing catches these, flags the cluster and moves on.
"""


class AerofuseError(Exception):
    """Base class for all pipeline errors."""


# --- geometry ---------------------------------------------------------------


class NonPositiveDepth(AerofuseError):
    """Point is on or behind the camera plane (z <= 0 in camera frame)."""


class DegenerateGeometry(AerofuseError):
    """Triangulation has no usable solution (parallel rays, zero baseline,
    fewer than two observations, or a cheirality failure)."""


class MissingPrior(AerofuseError):
    """An operation needed a GNSS prior the frame does not carry."""


class HorizonRay(AerofuseError):
    """A footprint ray does not hit the ground plane in front of the camera."""


# --- clustering -------------------------------------------------------------


class InsufficientFrames(AerofuseError):
    """Fewer than three frames remain and the stream is closed."""


class InsufficientOverlap(AerofuseError):
    """Second frame already falls below the overlap threshold.

    In the pipeline this is signalled by degrading the cluster to a fixed
    triple with a warning flag rather than by raising; the class exists for
    callers that want to treat the flag as an error.
    """


# --- two-view / bundle adjustment -------------------------------------------


class TooFewCorrespondences(AerofuseError):
    """Fewer than eight correspondences for essential-matrix RANSAC."""


class NoConsensus(AerofuseError):
    """RANSAC found no model above the minimum inlier ratio."""


class DisconnectedCluster(AerofuseError):
    """No pose seed source connects this window to known geometry."""


class SingularSystem(AerofuseError):
    """Reduced camera system is rank deficient beyond the frozen gauge."""


class Diverged(AerofuseError):
    """Damping exceeded its ceiling without a cost decrease."""


# --- anchors / densification -------------------------------------------------


class EmptyAnchor(AerofuseError):
    """No tie-point projects into the representative frame."""


class ContractViolation(AerofuseError):
    """A densifier output broke the output contract (anchor agreement,
    depth range, validity coverage or determinism)."""


class ExternalTimeout(AerofuseError):
    """External densifier worker did not finish within the timeout."""


class DimensionMismatch(AerofuseError):
    """Depth raster and anchor map disagree on frame dimensions."""


# --- fusion -----------------------------------------------------------------


class OutOfVolume(AerofuseError):
    """Depth frustum misses the TSDF volume entirely (warning-level)."""


class EmptyVolume(AerofuseError):
    """No voxel carries weight; nothing to extract."""


class NoImagery(AerofuseError):
    """Orthomosaic requested but no frame carries an image."""


# --- metrics ----------------------------------------------------------------


class ZeroGroundTruth(AerofuseError):
    """Relative error is undefined against a zero ground-truth distance."""


class TooFewCells(AerofuseError):
    """Not enough valid raster cells for the requested statistic."""


# --- I/O and configuration ---------------------------------------------------


class InputFormatError(AerofuseError):
    """Malformed input file; message carries file name and line number."""


class ConfigError(AerofuseError):
    """Bad or missing pipeline configuration."""
